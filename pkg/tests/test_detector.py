import pytest
import torch
import torch.nn.functional as F

from prompthoi.detector import (
    DecoderStack,
    DetectionOutput,
    ModelConfig,
    MultiPromptHOIDetector,
    decode_instances,
    decode_triplets,
    merge_queries,
    triplet_scores,
)
from prompthoi.encoders import RandomProjectionEmbedder, parameter_census
from tiny import TINY, random_banks, tiny_model


def test_forward_shapes_and_ranges(space):
    model = tiny_model()
    ob, ib = random_banks(space)
    out = model(torch.rand(3, 3, 32, 32, dtype=torch.float64), ob, ib)
    n = TINY.num_queries
    assert out.human_boxes.shape == out.object_boxes.shape == (3, n, 4)
    assert out.object_similarity.shape == (3, n, len(space.objects) + 1)
    assert out.interaction_similarity.shape == (3, n, len(space.hois) + 1)
    assert out.instance_queries.shape == (3, 2, n, TINY.channels)
    for boxes in (out.human_boxes, out.object_boxes):
        assert (boxes > 0).all() and (boxes < 1).all()
    for sim in (out.object_similarity, out.interaction_similarity):
        assert (sim.abs() <= 1 + 1e-12).all()
    for p in (out.object_probs, out.interaction_probs):
        assert torch.allclose(p.sum(-1), torch.ones(3, n, dtype=torch.float64), atol=1e-12)


def test_empty_banks_and_zero_queries_rejected(space):
    model = tiny_model()
    ob, ib = random_banks(space)
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 32, 32, dtype=torch.float64), ob[:0], ib)
    with pytest.raises(ValueError):
        decode_instances(DecoderStack(8, 2, 1), torch.rand(1, 8, 4, 4), torch.zeros(2, 0, 8), torch.zeros(2, 0, 8))


def test_merge_queries_is_pair_mean():
    paired = torch.randn(2, 2, 5, 8)
    assert torch.equal(merge_queries(paired), (paired[:, 0] + paired[:, 1]) / 2)


def test_zero_gate_equals_fusion_free_model(space):
    model = tiny_model(perturb=False)
    free = MultiPromptHOIDetector(TINY.model_copy(update={"use_conditioned_features": False}),
                                  RandomProjectionEmbedder(16, seed=0)).double()
    free.load_state_dict(model.state_dict())
    ob, ib = random_banks(space)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    a, b = model(x, ob, ib), free(x, ob, ib)
    for k, v in a.tensors().items():
        assert torch.equal(v, b.tensors()[k]), k


def test_scene_adaptor_toggles_change_outputs(space):
    ob, ib = random_banks(space)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    base = tiny_model()
    ref = base(x, ob, ib).interaction_similarity
    for toggle in ("use_beta", "use_alpha", "use_scene_embedding"):
        variant = MultiPromptHOIDetector(TINY.model_copy(update={toggle: False}),
                                         RandomProjectionEmbedder(16, seed=0)).double()
        variant.load_state_dict(base.state_dict())
        assert not torch.equal(variant(x, ob, ib).interaction_similarity, ref), toggle


def test_frozen_modules_hold_no_trainable_parameters():
    model = tiny_model()
    census = parameter_census(model)
    assert "provider" in census.frozen_modules and "extractor" in census.frozen_modules
    for name in model.frozen_modules():
        assert all(not p.requires_grad for p in getattr(model, name).parameters())
    assert census.trainable == sum(p.numel() for p in model.parameters() if p.requires_grad)


def test_model_config_rejects_unknown_keys_and_bad_timestep():
    with pytest.raises(ValueError):
        ModelConfig(bogus=1)
    with pytest.raises(ValueError):
        ModelConfig(timestep=1001)


def _hand_output(p_obj, p_int):
    """DetectionOutput whose softmax at tau=1 reproduces the given log-probabilities."""
    b, n, _ = p_obj.shape
    box = torch.full((b, n, 4), 0.5)
    return DetectionOutput(box, box, p_obj.log(), p_int.log(), torch.zeros(b, 2, n, 4), torch.zeros(b, n, 4),
                           torch.tensor(1.0))


def test_triplet_score_is_object_times_interaction(space):
    hoi_ids = [0, 5]
    obj_ids = sorted({space.hois[h][1] for h in hoi_ids})
    p_obj = F.softmax(torch.randn(1, 3, len(obj_ids) + 1), -1)
    p_int = F.softmax(torch.randn(1, 3, len(hoi_ids) + 1), -1)
    out = _hand_output(p_obj, p_int)
    scores = triplet_scores(out, obj_ids, hoi_ids, space)
    for j, h in enumerate(hoi_ids):
        col = obj_ids.index(space.hois[h][1])
        assert torch.allclose(scores[0, :, j], out.object_probs[0, :, col] * out.interaction_probs[0, :, j])


def test_triplet_score_zero_when_object_missing(space):
    out = _hand_output(F.softmax(torch.randn(1, 2, 2), -1), F.softmax(torch.randn(1, 2, 2), -1))
    other = next(o for o in range(len(space.objects)) if o != space.hois[0][1])
    assert torch.equal(triplet_scores(out, [other], [0], space), torch.zeros(1, 2, 1))


def test_decode_triplets_top_k_and_tie_order(space):
    hoi_ids = [0, 5]
    obj_ids = sorted({space.hois[h][1] for h in hoi_ids})
    uniform_o = torch.full((1, 3, len(obj_ids) + 1), 1.0 / (len(obj_ids) + 1))
    uniform_i = torch.full((1, 3, len(hoi_ids) + 1), 1.0 / (len(hoi_ids) + 1))
    dets = decode_triplets(_hand_output(uniform_o, uniform_i), obj_ids, hoi_ids, space, top_k=4)[0]
    assert len(dets) == 4
    # all scores tie, so the order is (query 0, hoi 0), (query 0, hoi 5), (query 1, hoi 0), ...
    assert [(d.verb_class, d.object_class) for d in dets] == [space.hois[h] for h in (0, 5, 0, 5)]
    scores = [d.score for d in decode_triplets(_hand_output(F.softmax(torch.randn(1, 3, len(obj_ids) + 1), -1),
                                                            F.softmax(torch.randn(1, 3, 3), -1)),
                                               obj_ids, hoi_ids, space, top_k=100)[0]]
    assert scores == sorted(scores, reverse=True) and len(scores) == 6
