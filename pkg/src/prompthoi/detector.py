"""Paired human-object queries -> instance decoder -> merged interaction queries -> interaction decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .boxes import Box
from .encoders import (
    AdaptorAlpha,
    AdaptorBeta,
    ConditionedExtractor,
    FeatureEncoder,
    GatedFusion,
    NoiseSchedule,
    SceneEmbedder,
    sine_position_encoding,
)
from .label_space import UnifiedLabelSpace
from .prompts import bank_similarity
from .records import ScoredTriplet


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_queries: int = Field(32, ge=1)
    channels: int = Field(64, ge=4, multiple_of=4)
    heads: int = 4
    encoder_layers: int = 1
    instance_layers: int = 3
    interaction_layers: int = 3
    pyramid_widths: tuple[int, ...] = (32, 64, 64)
    extractor_seed: int = 1234
    timestep: int = Field(0, ge=0, le=1000)
    use_conditioned_features: bool = True  # F_sd + gated fusion
    use_scene_embedding: bool = True  # F_clip feeding alpha and beta
    use_alpha: bool = True
    use_beta: bool = True
    tau_init: float = Field(0.07, gt=0)
    adaptor_hidden: int = Field(128, ge=1)
    backbone_width: int = Field(32, ge=1)


@dataclass
class DetectionOutput:
    human_boxes: torch.Tensor  # (B, N, 4) cx, cy, w, h
    object_boxes: torch.Tensor  # (B, N, 4)
    object_similarity: torch.Tensor  # (B, N, |object bank| + 1) cosines, last column = no-object
    interaction_similarity: torch.Tensor  # (B, N, |interaction bank| + 1)
    instance_queries: torch.Tensor  # (B, 2, N, C)
    interaction_queries: torch.Tensor  # (B, N, C)
    tau: torch.Tensor  # scalar temperature

    @property
    def object_logits(self) -> torch.Tensor:
        return self.object_similarity / self.tau

    @property
    def interaction_logits(self) -> torch.Tensor:
        return self.interaction_similarity / self.tau

    @property
    def object_probs(self) -> torch.Tensor:
        return self.object_logits.softmax(-1)

    @property
    def interaction_probs(self) -> torch.Tensor:
        return self.interaction_logits.softmax(-1)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in (
            "human_boxes", "object_boxes", "object_similarity", "interaction_similarity",
            "instance_queries", "interaction_queries", "tau")}


class DecoderLayer(nn.Module):
    """Self-attention over queries, cross-attention over the feature map, feed-forward."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))
        self.norm1 = nn.LayerNorm(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.norm3 = nn.LayerNorm(channels)

    def forward(self, tgt, query_pos, memory, memory_pos):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, need_weights=False)[0])
        tgt = self.norm2(
            tgt + self.cross_attn(tgt + query_pos, memory + memory_pos, memory, need_weights=False)[0]
        )
        return self.norm3(tgt + self.ffn(tgt))


class DecoderStack(nn.Module):
    def __init__(self, channels: int, heads: int, layers: int):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(channels, heads) for _ in range(layers))

    def forward(self, tgt, query_pos, memory, memory_pos):
        for layer in self.layers:
            tgt = layer(tgt, query_pos, memory, memory_pos)
        return tgt


class BoxHead(nn.Module):
    """3-layer feed-forward head; sigmoid keeps every coordinate in (0, 1)."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels, channels), nn.GELU(),
            nn.Linear(channels, channels), nn.GELU(),
            nn.Linear(channels, 4),
        )

    def forward(self, q):
        return self.net(q).sigmoid().clamp(1e-6, 1 - 1e-6)


def flatten_map(fmap: torch.Tensor):
    b, c, h, w = fmap.shape
    pos = sine_position_encoding(c, h, w, fmap.dtype).to(fmap.device)
    return fmap.flatten(2).transpose(1, 2), pos.flatten(1).transpose(0, 1).unsqueeze(0)


def decode_instances(decoder: DecoderStack, features: torch.Tensor, query_content: torch.Tensor,
                     query_pos: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) map and (2, N, C) learned pair content / position -> Q'_{h,o} of shape (B, 2, N, C)."""
    two, n, c = query_pos.shape
    if n == 0:
        raise ValueError("query count must be positive")
    b = features.shape[0]
    memory, mem_pos = flatten_map(features)
    pos = query_pos.reshape(1, two * n, c).expand(b, -1, -1)
    tgt = query_content.reshape(1, two * n, c).expand(b, -1, -1)
    out = decoder(tgt, pos, memory, mem_pos)
    return out.reshape(b, two, n, c)


def merge_queries(paired: torch.Tensor) -> torch.Tensor:
    """Average the human and object rows of each pair: (..., 2, N, C) -> (..., N, C)."""
    return (paired[..., 0, :, :] + paired[..., 1, :, :]) / 2


def decode_interactions(
    decoder: DecoderStack, fused: torch.Tensor, queries: torch.Tensor, query_pos: torch.Tensor, beta_offset
) -> torch.Tensor:
    memory, mem_pos = flatten_map(fused)
    out = decoder(queries, query_pos.unsqueeze(0).expand(queries.shape[0], -1, -1), memory, mem_pos)
    if beta_offset is not None:
        out = out + beta_offset[:, None, :]
    return out


def predict_boxes(human_head: BoxHead, object_head: BoxHead, paired: torch.Tensor):
    return human_head(paired[:, 0]), object_head(paired[:, 1])


class MultiPromptHOIDetector(nn.Module):
    def __init__(self, cfg: ModelConfig, provider: SceneEmbedder):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.channels, provider.dim
        self.provider = provider
        for p in self.provider.parameters():
            p.requires_grad_(False)
        self.alpha = AdaptorAlpha(d, cfg.adaptor_hidden)
        self.beta = AdaptorBeta(d, c, cfg.adaptor_hidden)
        self.extractor = ConditionedExtractor(d, cfg.pyramid_widths, cfg.extractor_seed, NoiseSchedule())
        self.encoder = FeatureEncoder(c, cfg.encoder_layers, cfg.heads, cfg.backbone_width)
        self.fusion = GatedFusion(c, cfg.pyramid_widths)
        self.query_content = nn.Parameter(torch.randn(2, cfg.num_queries, c))
        self.query_pos = nn.Parameter(torch.randn(2, cfg.num_queries, c))
        self.instance_decoder = DecoderStack(c, cfg.heads, cfg.instance_layers)
        self.interaction_decoder = DecoderStack(c, cfg.heads, cfg.interaction_layers)
        self.human_box = BoxHead(c)
        self.object_box = BoxHead(c)
        self.object_proj = nn.Linear(c, d)
        self.interaction_proj = nn.Linear(c, d)
        self.object_background = nn.Parameter(F.normalize(torch.randn(d), dim=0))
        self.interaction_background = nn.Parameter(F.normalize(torch.randn(d), dim=0))
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def frozen_modules(self) -> tuple[str, ...]:
        return ("provider", "extractor")

    def scene(self, images: torch.Tensor) -> torch.Tensor | None:
        if not self.cfg.use_scene_embedding:
            return None
        with torch.no_grad():
            return self.provider.encode_image(images).to(images.dtype)

    def condition(self, scene):
        if scene is None:
            return torch.zeros(1, self.provider.dim)
        return self.alpha(scene) if self.cfg.use_alpha else scene

    def features(self, images: torch.Tensor, scene=None):
        """-> (F for the instance decoder, F' for the interaction decoder)."""
        fmap = self.encoder(images)
        if not self.cfg.use_conditioned_features:
            return fmap, fmap
        cond = self.condition(scene).to(images.dtype)
        if cond.shape[0] != images.shape[0]:
            cond = cond.expand(images.shape[0], -1)
        pyramid = self.extractor(images, cond, self.cfg.timestep)
        return fmap, self.fusion(fmap, pyramid)

    def forward(self, images: torch.Tensor, object_bank: torch.Tensor, interaction_bank: torch.Tensor) -> DetectionOutput:
        if object_bank.shape[-2] == 0 or interaction_bank.shape[-2] == 0:
            raise ValueError("prompt banks must be non-empty")
        scene = self.scene(images)
        fmap, fused = self.features(images, scene)
        paired = decode_instances(self.instance_decoder, fmap, self.query_content, self.query_pos)
        merged = merge_queries(paired)
        offset = self.beta(scene) if (scene is not None and self.cfg.use_beta) else None
        inter = decode_interactions(
            self.interaction_decoder, fused, merged, merge_queries(self.query_pos), offset
        )
        hb, ob = predict_boxes(self.human_box, self.object_box, paired)
        obj_sim = bank_similarity(paired[:, 1], object_bank.to(images.dtype), self.object_proj,
                                  self.object_background)
        int_sim = bank_similarity(inter, interaction_bank.to(images.dtype), self.interaction_proj,
                                  self.interaction_background)
        return DetectionOutput(hb, ob, obj_sim, int_sim, paired, inter, self.tau)


def triplet_scores(out: DetectionOutput, object_ids, interaction_ids, label_space: UnifiedLabelSpace):
    """(B, N, K_i) scores P_o[object of h] * P_i[h] over the interaction bank entries.

    Entries whose object is absent from the object bank score 0.
    """
    p_o = out.object_probs
    p_i = out.interaction_probs[..., : len(interaction_ids)]
    obj_col = {c: j for j, c in enumerate(object_ids)}
    cols = [obj_col.get(label_space.hois[h][1], -1) for h in interaction_ids]
    idx = torch.tensor([max(c, 0) for c in cols], device=p_o.device)
    valid = torch.tensor([c >= 0 for c in cols], device=p_o.device, dtype=p_o.dtype)
    return p_o[..., idx] * p_i * valid


def _box_from_cxcywh(v) -> Box:
    cx, cy, w, h = (float(x) for x in v)
    return Box(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), min(w, 1.0), min(h, 1.0))


def decode_triplets(
    out: DetectionOutput, object_ids, interaction_ids, label_space: UnifiedLabelSpace, top_k: int = 100
) -> list[list[ScoredTriplet]]:
    """Top-k (query, HOI) pairs per image by triplet score; ties broken by (query, bank column)."""
    scores = triplet_scores(out, object_ids, interaction_ids, label_space).detach().double().cpu().numpy()
    hb = out.human_boxes.detach().double().cpu().numpy()
    ob = out.object_boxes.detach().double().cpu().numpy()
    results = []
    for b in range(scores.shape[0]):
        flat = scores[b].reshape(-1)
        order = np.lexsort((np.arange(flat.size), -flat))[:top_k]
        k_i = scores.shape[2]
        dets = []
        for f in order:
            n, j = divmod(int(f), k_i)
            action, obj = label_space.hois[interaction_ids[j]]
            dets.append(ScoredTriplet(_box_from_cxcywh(hb[b, n]), _box_from_cxcywh(ob[b, n]), obj, action,
                                      float(flat[f])))
        results.append(dets)
    return results
