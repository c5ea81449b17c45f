import math

import numpy as np
import pytest
import torch

from prompthoi.detector import DetectionOutput
from prompthoi.losses import (
    LossBreakdown,
    LossWeights,
    build_targets,
    contrastive_loss,
    total_loss,
)
from prompthoi.synth import generate_corpus
from prompthoi.training import EmbedderSettings, TrainSettings, _frozen_tensors, build_model, train
from tiny import TINY, annotation, random_banks, sample_targets, tiny_model


def _direct_infonce(s: np.ndarray, tau: float) -> float:
    b = s.shape[0]
    total = 0.0
    for i in range(b):
        total += -math.log(math.exp(s[i, i] / tau) / sum(math.exp(s[i, j] / tau) for j in range(b)))
    return total / b


def test_contrastive_single_pair_is_zero():
    assert contrastive_loss(torch.tensor([[0.3]], dtype=torch.float64), 0.07).item() == 0.0


@pytest.mark.parametrize("b", [2, 5, 17])
def test_contrastive_uniform_is_log_b(b):
    s = torch.full((b, b), 0.25, dtype=torch.float64)
    assert abs(contrastive_loss(s, 0.07).item() - math.log(b)) < 1e-6


def test_contrastive_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = int(rng.integers(1, 9))
        s = rng.uniform(-1, 1, (b, b))
        tau = float(rng.uniform(0.05, 1.0))
        got = contrastive_loss(torch.tensor(s), tau).item()
        assert abs(got - _direct_infonce(s, tau)) < 1e-9


def test_contrastive_row_shift_invariance_and_targets():
    rng = np.random.default_rng(1)
    s = torch.tensor(rng.uniform(-1, 1, (6, 4)))
    targets = torch.tensor([0, 1, 2, 3, 3, 0])
    base = contrastive_loss(s, 0.1, targets)
    shifted = s.clone()
    shifted[2] += 0.7
    assert contrastive_loss(shifted, 0.1, targets).item() == pytest.approx(base.item(), abs=1e-12)
    w = torch.tensor([1.0, 1.0, 0.1, 0.1, 1.0, 1.0], dtype=torch.float64)
    per_row = torch.stack([contrastive_loss(s[i:i + 1], 0.1, targets[i:i + 1]) for i in range(6)])
    assert contrastive_loss(s, 0.1, targets, w).item() == pytest.approx(((per_row * w).sum() / w.sum()).item(), abs=1e-12)


def test_contrastive_rejects_bad_temperature_and_shapes():
    s = torch.eye(3, dtype=torch.float64)
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            contrastive_loss(s, tau)
    with pytest.raises(ValueError):
        contrastive_loss(torch.zeros(2, 3), 0.1)


def test_breakdown_linearity_exact():
    bd = LossBreakdown(0.37, 0.81, 1.3, 2.9, 2.5, 1.0, 1.0, 1.0, 0.07)
    for w, term in (("w_b", "box"), ("w_g", "giou"), ("w_c_o", "object"), ("w_c_i", "interaction")):
        doubled = LossBreakdown(**{**bd.__dict__, w: 2 * getattr(bd, w)})
        for k, v in doubled.contributions.items():
            assert v == (2 * bd.contributions[k] if k == term else bd.contributions[k])
    assert bd.total == sum(bd.contributions.values())


def test_total_loss_breakdown_and_weights(space):
    model = tiny_model()
    ob, ib = random_banks(space)
    out = model(torch.rand(2, 3, 32, 32, dtype=torch.float64), ob, ib)
    tg = sample_targets(space)
    loss, bd, matches = total_loss(out, tg)
    assert [len(m) for m in matches] == [1, 2]
    assert loss.item() == pytest.approx(bd.total, rel=1e-12)
    assert bd.l_b > 0 and 0 < bd.l_g < 4 and bd.l_c_o > 0 and bd.l_c_i > 0
    no_obj = LossWeights(object=0.0)
    _, bd0, _ = total_loss(out, tg, no_obj, matches)
    assert bd0.total == pytest.approx(bd.total - bd.l_c_o, rel=1e-12)
    assert bd0.l_c_o == bd.l_c_o


def test_perfect_boxes_give_zero_box_losses(space):
    tg = sample_targets(space)[1:]
    n = 3
    hb = torch.full((1, n, 4), 0.5, dtype=torch.float64)
    obb = hb.clone()
    hb[0, :2], obb[0, :2] = tg[0].human, tg[0].object
    sim_o = torch.zeros(1, n, len(space.objects) + 1, dtype=torch.float64)
    sim_i = torch.zeros(1, n, len(space.hois) + 1, dtype=torch.float64)
    out = DetectionOutput(hb, obb, sim_o, sim_i, torch.zeros(1, 2, n, 4), torch.zeros(1, n, 4),
                          torch.tensor(0.07, dtype=torch.float64))
    _, bd, matches = total_loss(out, tg)
    assert matches[0].assignment == ((0, 0), (1, 1))
    assert bd.l_b == 0.0 and abs(bd.l_g) < 1e-12
    # uniform similarities: every query's loss is log(K + 1)
    assert bd.l_c_o == pytest.approx(math.log(len(space.objects) + 1), abs=1e-12)


def test_multi_verb_pair_gives_one_target_per_triplet(space):
    obj = space.hois[0][1]
    hois = [h for h, (a, o) in enumerate(space.hois) if o == obj][:2]
    assert len(hois) == 2
    box_h, box_o = (0.3, 0.5, 0.2, 0.6), (0.6, 0.5, 0.2, 0.2)
    tg = build_targets([annotation(space, h, box_h, box_o) for h in hois],
                       range(len(space.objects)), range(len(space.hois)), space)
    assert len(tg) == 2 and tg.interaction_cols.tolist() == hois
    assert torch.equal(tg.human[0], tg.human[1])


def test_build_targets_missing_category(space):
    ann = [annotation(space, 3, (0.3, 0.5, 0.2, 0.6), (0.6, 0.5, 0.2, 0.2))]
    with pytest.raises(KeyError):
        build_targets(ann, [], range(len(space.hois)), space)
    with pytest.raises(KeyError):
        build_targets(ann, range(len(space.objects)), [0], space)


def test_non_finite_loss_raises(space):
    model = tiny_model()
    ob, ib = random_banks(space)
    out = model(torch.rand(2, 3, 32, 32, dtype=torch.float64), ob, ib)
    out.human_boxes = out.human_boxes * float("nan")
    tg = sample_targets(space)
    with pytest.raises(FloatingPointError, match="human_boxes"):
        total_loss(out, tg)


def test_one_step_changes_exactly_the_trainable_set(space):
    data = generate_corpus(8, space, seed=4)
    model = build_model(data, TINY, EmbedderSettings(name="random_projection", dim=16), seed=0)
    before = {k: v.detach().clone() for k, v in model.state_dict().items()}
    declared = {n for n, p in model.named_parameters() if p.requires_grad}
    frozen = set(_frozen_tensors(model))
    assert declared and frozen and not declared & frozen
    train(data, None, settings=TrainSettings(epochs=1, max_steps=1, batch_size=4, visual_prob=0.0), model=model)
    after = model.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed == declared
