"""Training loop with per-step prompt-modality sampling, frozen-provider checks and per-epoch eval."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .data import HOIDataset, images_to_tensor
from .detector import ModelConfig, MultiPromptHOIDetector, decode_triplets
from .encoders import RandomProjectionEmbedder, SceneEmbedder, to_float_images
from .evaluation import EvalReport, evaluate_map
from .label_space import RarityStats
from .losses import LossWeights, Targets, build_targets, total_loss
from .pretrain import pretrain_dual_encoder, warm_start_alpha
from .prompts import PromptBank, crop, encode_textual_prompts, union_box
from .sampling import VISUAL, NoVisualPair, SignatureIndex, sample_prompt_modality, sample_visual_prompt_pair

log = logging.getLogger(__name__)


class EmbedderSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field("toy_dual", pattern="^(toy_dual|random_projection)$")
    dim: int = Field(64, ge=4)
    seed: int = 0
    pretrain_steps: int = Field(400, ge=0)
    alpha_warm_start_steps: int = Field(300, ge=0)


class TrainSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(15, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    decay_epoch: int | None = None  # single step decay of the learning rate
    decay_factor: float = Field(0.1, gt=0)
    grad_clip: float = Field(1.0, gt=0)
    visual_prob: float = Field(0.5, ge=0, le=1)
    seed: int = 0
    top_k: int = Field(100, ge=1)
    eval_every: int = Field(1, ge=0)  # epochs between evaluations; 0 = only at the end
    max_steps: int | None = None


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: MultiPromptHOIDetector
    object_bank: PromptBank
    interaction_bank: PromptBank
    rarity: RarityStats
    history: list[dict] = field(default_factory=list)
    report: EvalReport | None = None


def text_banks(model: MultiPromptHOIDetector, label_space) -> tuple[PromptBank, PromptBank]:
    provider = model.provider
    ob = encode_textual_prompts(range(len(label_space.objects)), label_space, provider, "object")
    ib = encode_textual_prompts(range(len(label_space.hois)), label_space, provider, "interaction")
    return ob, ib


def build_provider_for(train_set: HOIDataset, emb: EmbedderSettings) -> SceneEmbedder:
    if emb.name == "random_projection":
        return RandomProjectionEmbedder(emb.dim, emb.seed)
    return pretrain_dual_encoder(train_set, emb.dim, emb.pretrain_steps, seed=emb.seed)


def build_model(train_set: HOIDataset, model_cfg: ModelConfig, emb: EmbedderSettings, seed: int = 0,
                provider: SceneEmbedder | None = None) -> MultiPromptHOIDetector:
    if provider is None:
        provider = build_provider_for(train_set, emb)
    torch.manual_seed(seed)
    model = MultiPromptHOIDetector(model_cfg, provider)
    if emb.alpha_warm_start_steps and model_cfg.use_alpha:
        warm_start_alpha(model.alpha, provider, train_set, emb.alpha_warm_start_steps, seed=seed)
    return model


class ExemplarCache:
    """Per-image mean crop embeddings, keyed by object id and by HOI id."""

    def __init__(self, provider: SceneEmbedder, dataset: HOIDataset):
        self.provider = provider
        self.dataset = dataset
        self._cache: dict[int, tuple[dict, dict]] = {}

    def __getitem__(self, i: int):
        if i not in self._cache:
            s = self.dataset.samples[i]
            img = to_float_images(s.image)[0]
            space = self.dataset.label_space
            objs, inters = {}, {}
            with torch.no_grad():
                for t in s.annotations:
                    objs.setdefault(t.object_class, []).append(
                        self.provider.encode_image(crop(img, t.object)[None])[0])
                    inters.setdefault(space.hoi_id(t.verb_class, t.object_class), []).append(
                        self.provider.encode_image(crop(img, union_box(t.human, t.object))[None])[0])
            mean = lambda d: {k: torch.nn.functional.normalize(torch.stack(v).mean(0), dim=-1) for k, v in d.items()}
            self._cache[i] = (mean(objs), mean(inters))
        return self._cache[i]


def visual_bank(base: PromptBank, exemplars: dict) -> torch.Tensor:
    """Text bank embeddings with the categories shown in a prompt image swapped for its crop embeddings."""
    emb = base.embeddings.clone()
    for cat, e in exemplars.items():
        emb[base.column(cat)] = e.to(emb.dtype)
    return emb


def assert_frozen(model: MultiPromptHOIDetector, snapshot: dict[str, torch.Tensor]) -> None:
    for name, tensor in _frozen_tensors(model).items():
        if tensor.requires_grad or (tensor.grad is not None):
            raise AssertionError(f"frozen tensor {name} is trainable")
        if not torch.equal(tensor, snapshot[name]):
            raise AssertionError(f"frozen tensor {name} changed during training")


def _frozen_tensors(model: MultiPromptHOIDetector) -> dict[str, torch.Tensor]:
    out = {}
    for prefix in model.frozen_modules():
        mod = getattr(model, prefix)
        for n, p in list(mod.named_parameters()) + list(mod.named_buffers()):
            out[f"{prefix}.{n}"] = p
    return out


@torch.no_grad()
def predict_dataset(model, dataset: HOIDataset, object_bank: PromptBank, interaction_bank: PromptBank,
                    top_k: int = 100, batch_size: int = 50):
    model.eval()
    preds = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        out = model(images_to_tensor([s.image for s in chunk]), object_bank.embeddings, interaction_bank.embeddings)
        preds.extend(decode_triplets(out, object_bank.category_ids, interaction_bank.category_ids,
                                     dataset.label_space, top_k))
    return preds


def evaluate_model(model, dataset: HOIDataset, object_bank, interaction_bank, rarity=None, top_k: int = 100):
    preds = predict_dataset(model, dataset, object_bank, interaction_bank, top_k)
    return evaluate_map(preds, [s.annotations for s in dataset.samples], dataset.label_space, 0.5, rarity)


def _dump_diagnostic(path, step, image_ids, breakdown_error, out):
    if path is None:
        return
    diag = {
        "step": step,
        "image_ids": image_ids,
        "error": breakdown_error,
        "non_finite": {k: int((~torch.isfinite(v)).sum()) for k, v in out.tensors().items()},
    }
    Path(path).write_text(json.dumps(diag, indent=1))


def train(
    train_set: HOIDataset,
    eval_set: HOIDataset | None,
    model_cfg: ModelConfig = ModelConfig(),
    settings: TrainSettings = TrainSettings(),
    embedder: EmbedderSettings = EmbedderSettings(),
    weights: LossWeights = LossWeights(),
    metrics_path=None,
    diagnostic_path=None,
    model: MultiPromptHOIDetector | None = None,
) -> TrainResult:
    torch.set_num_threads(1)
    space = train_set.label_space
    if model is None:
        model = build_model(train_set, model_cfg, embedder, settings.seed)
    ob, ib = text_banks(model, space)
    rarity = train_set.rarity()
    targets_all = [build_targets(s.annotations, ob.category_ids, ib.category_ids, space) for s in train_set.samples]
    images_all = images_to_tensor([s.image for s in train_set.samples])
    exemplars = ExemplarCache(model.provider, train_set)
    sig_index = SignatureIndex(train_set)

    trainable = [p for n, p in model.named_parameters() if p.requires_grad]
    opt = torch.optim.AdamW(trainable, lr=settings.lr, weight_decay=settings.weight_decay)
    frozen_snapshot = {k: v.detach().clone() for k, v in _frozen_tensors(model).items()}
    rng = np.random.default_rng(settings.seed)
    order_gen = torch.Generator().manual_seed(settings.seed)
    history: list[dict] = []
    log_file = open(metrics_path, "w") if metrics_path else None

    def emit(rec):
        history.append(rec)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")

    n = len(train_set)
    step = 0
    report = None
    try:
        for epoch in range(settings.epochs):
            if settings.decay_epoch is not None and epoch == settings.decay_epoch:
                for group in opt.param_groups:
                    group["lr"] *= settings.decay_factor
            perm = torch.randperm(n, generator=order_gen).tolist()
            model.train()
            for start in range(0, n, settings.batch_size):
                if settings.max_steps is not None and step >= settings.max_steps:
                    break
                idx = perm[start:start + settings.batch_size]
                modality = sample_prompt_modality(rng, settings.visual_prob)
                obj_emb, int_emb = ob.embeddings, ib.embeddings
                if modality == VISUAL:
                    try:
                        pairs = [sample_visual_prompt_pair(sig_index, rng) for _ in idx]
                    except NoVisualPair:
                        modality, pairs = "text", None
                    if pairs is not None:
                        idx = [target for _, target in pairs]
                        obj_emb = torch.stack([visual_bank(ob, exemplars[p][0]) for p, _ in pairs])
                        int_emb = torch.stack([visual_bank(ib, exemplars[p][1]) for p, _ in pairs])
                out = model(images_all[idx], obj_emb, int_emb)
                try:
                    loss, breakdown, _ = total_loss(out, [targets_all[i] for i in idx], weights)
                    if not torch.isfinite(loss):
                        raise FloatingPointError("non-finite total loss")
                except FloatingPointError as err:
                    _dump_diagnostic(diagnostic_path, step, [train_set.samples[i].image_id for i in idx], str(err), out)
                    raise TrainingDiverged(f"step {step}: {err}") from err
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(trainable, settings.grad_clip)
                opt.step()
                assert_frozen(model, frozen_snapshot)
                emit({"kind": "step", "epoch": epoch, "step": step, "modality": modality, **breakdown.to_dict()})
                step += 1
            last = epoch == settings.epochs - 1
            if eval_set is not None and (last or (settings.eval_every and (epoch + 1) % settings.eval_every == 0)):
                report = evaluate_model(model, eval_set, ob, ib, rarity, settings.top_k)
                emit({"kind": "eval", "epoch": epoch, "step": step, "map_full": report.map_full,
                      "map_rare": report.map_rare, "map_nonrare": report.map_nonrare})
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return TrainResult(model, ob, ib, rarity, history, report)
