"""Prompt banks (textual templates or visual exemplar crops) and the bank classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import Box
from .encoders import SceneEmbedder, to_float_images
from .label_space import UnifiedLabelSpace
from .text import interaction_sentence, object_sentence

KINDS = ("object", "interaction")


@dataclass(frozen=True, eq=False)
class PromptBank:
    kind: str
    category_ids: tuple[int, ...]
    modalities: tuple[str, ...]
    embeddings: torch.Tensor  # (K, D), unit rows
    provider: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"bank kind must be one of {KINDS}")
        if len(set(self.category_ids)) != len(self.category_ids):
            raise ValueError("category ids must be unique within a bank")
        if self.embeddings.shape[0] != len(self.category_ids) or len(self.modalities) != len(self.category_ids):
            raise ValueError("one embedding and one modality tag per category")
        if len(self.category_ids) == 0:
            raise ValueError("empty prompt bank")
        norms = self.embeddings.detach().double().norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("bank embeddings must be unit-normalized")

    def __len__(self) -> int:
        return len(self.category_ids)

    def column(self, category_id: int) -> int:
        try:
            return self.category_ids.index(category_id)
        except ValueError:
            raise KeyError(f"category {category_id} is not in the {self.kind} bank") from None

    def replace(self, category_id: int, embedding: torch.Tensor, modality: str = "visual") -> "PromptBank":
        col = self.column(category_id)
        emb = self.embeddings.clone()
        emb[col] = F.normalize(embedding.to(emb.dtype), dim=-1)
        mods = list(self.modalities)
        mods[col] = modality
        return PromptBank(self.kind, self.category_ids, tuple(mods), emb, self.provider)

    def extend(self, other: "PromptBank") -> "PromptBank":
        if other.kind != self.kind:
            raise ValueError("cannot mix bank kinds")
        return PromptBank(
            self.kind,
            self.category_ids + other.category_ids,
            self.modalities + other.modalities,
            torch.cat([self.embeddings, other.embeddings.to(self.embeddings.dtype)]),
            self.provider,
        )

    def to(self, dtype) -> "PromptBank":
        return PromptBank(self.kind, self.category_ids, self.modalities, self.embeddings.to(dtype), self.provider)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "provider": self.provider,
            "category_ids": list(self.category_ids),
            "modalities": list(self.modalities),
            "embeddings": self.embeddings.double().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptBank":
        return cls(
            d["kind"],
            tuple(d["category_ids"]),
            tuple(d["modalities"]),
            torch.tensor(d["embeddings"], dtype=torch.float64).float(),
            d.get("provider", ""),
        )


def encode_textual_prompts(
    categories, label_space: UnifiedLabelSpace, provider: SceneEmbedder, kind: str, person: str = "person"
) -> PromptBank:
    """Object ids -> "A photo of a cup"; HOI ids -> "A photo of a person holding a cup"."""
    categories = list(categories)
    sentences = []
    for c in categories:
        if kind == "object":
            if not 0 <= c < len(label_space.objects):
                raise KeyError(f"unknown object id {c}")
            sentences.append(object_sentence(label_space.objects[c]))
        elif kind == "interaction":
            if not 0 <= c < len(label_space.hois):
                raise KeyError(f"unknown HOI id {c}")
            verb, obj = label_space.hoi_terms(c)
            sentences.append(interaction_sentence(verb, obj, person))
        else:
            raise ValueError(f"bank kind must be one of {KINDS}")
    with torch.no_grad():
        emb = provider.encode_text(sentences)
    return PromptBank(kind, tuple(categories), ("text",) * len(categories), emb.detach().clone(), provider.name)


@dataclass
class VisualPromptSpec:
    """Exemplars cut from one source image: object boxes and (human, object) pairs."""

    image: np.ndarray
    object_boxes: list[tuple[Box, int]] = field(default_factory=list)  # (box, object id)
    pair_boxes: list[tuple[Box, Box, int]] = field(default_factory=list)  # (human, object, HOI id)

    def to_dict(self) -> dict:
        return {
            "object_boxes": [{"box": list(b.corners()), "category": c} for b, c in self.object_boxes],
            "pair_boxes": [
                {"human": list(h.corners()), "object": list(o.corners()), "category": c} for h, o, c in self.pair_boxes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, image: np.ndarray) -> "VisualPromptSpec":
        return cls(
            image,
            [(Box.from_corners(*r["box"]), int(r["category"])) for r in d.get("object_boxes", [])],
            [
                (Box.from_corners(*r["human"]), Box.from_corners(*r["object"]), int(r["category"]))
                for r in d.get("pair_boxes", [])
            ],
        )


def union_box(a: Box, b: Box) -> Box:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    return Box.from_corners(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1))


def crop(image: torch.Tensor, box: Box) -> torch.Tensor:
    """Crop a (3, H, W) tensor to the pixels covered by a normalized box."""
    _, h, w = image.shape
    x0, y0, x1, y1 = box.corners()
    px0, py0 = max(0, math.floor(x0 * w + 1e-6)), max(0, math.floor(y0 * h + 1e-6))
    px1, py1 = min(w, math.ceil(x1 * w - 1e-6)), min(h, math.ceil(y1 * h - 1e-6))
    if px1 - px0 < 2 or py1 - py0 < 2:
        raise ValueError(f"crop {box.corners()} covers {px1 - px0}x{py1 - py0} pixels; at least 2x2 needed")
    return image[:, py0:py1, px0:px1]


def embed_crops(provider: SceneEmbedder, image: torch.Tensor, boxes) -> torch.Tensor:
    """Each crop is embedded on its own so results do not depend on batch companions."""
    with torch.no_grad():
        return torch.cat([provider.encode_image(crop(image, b).unsqueeze(0)) for b in boxes])


def _grouped_bank(kind, ids, embs, provider_name) -> PromptBank | None:
    if not ids:
        return None
    order = sorted(set(ids))
    rows = [F.normalize(embs[[i for i, c in enumerate(ids) if c == cat]].mean(0), dim=-1) for cat in order]
    return PromptBank(kind, tuple(order), ("visual",) * len(order), torch.stack(rows), provider_name)


def encode_visual_prompts(spec: VisualPromptSpec, provider: SceneEmbedder):
    """-> (object bank or None, interaction bank or None); several exemplars of one category are averaged."""
    image = to_float_images(spec.image)[0]
    obj_bank = inter_bank = None
    if spec.object_boxes:
        embs = embed_crops(provider, image, [b for b, _ in spec.object_boxes])
        obj_bank = _grouped_bank("object", [c for _, c in spec.object_boxes], embs, provider.name)
    if spec.pair_boxes:
        embs = embed_crops(provider, image, [union_box(h, o) for h, o, _ in spec.pair_boxes])
        inter_bank = _grouped_bank("interaction", [c for _, _, c in spec.pair_boxes], embs, provider.name)
    return obj_bank, inter_bank


def bank_similarity(queries: torch.Tensor, bank: torch.Tensor, projection, background=None) -> torch.Tensor:
    """Cosine similarity between projected queries and bank rows.

    ``queries`` is (..., N, C); ``bank`` is (K, D) or (B, K, D) for per-image banks.
    A ``background`` vector (D,) appends one no-object column.
    """
    q = F.normalize(projection(queries), dim=-1)
    t = F.normalize(bank, dim=-1)
    if background is not None:
        bg = F.normalize(background, dim=-1)
        bg = bg.expand(*t.shape[:-2], 1, bg.shape[-1])
        t = torch.cat([t, bg], dim=-2)
    if q.dim() == 3 and t.dim() == 2:
        # shared and per-image banks take the same batched kernel, so equal banks give equal bits
        t = t.expand(q.shape[0], -1, -1)
    return q @ t.transpose(-1, -2)


def classify_logits(queries, bank, projection, tau, background=None) -> torch.Tensor:
    return bank_similarity(queries, bank, projection, background) / tau


def classify(queries, bank, projection, tau, background=None) -> torch.Tensor:
    """Row-wise softmax of the temperature-scaled similarities: (N, |bank|) distributions."""
    return classify_logits(queries, bank, projection, tau, background).softmax(dim=-1)
