"""Set-prediction loss: matched box L1 + GIoU, plus contrastive object / interaction terms."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .boxes import cxcywh_to_xyxy, generalized_box_iou
from .matching import MatchResult, hungarian_match, match_cost


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    box: float = Field(2.5, ge=0)
    giou: float = Field(1.0, ge=0)
    object: float = Field(1.0, ge=0)
    interaction: float = Field(1.0, ge=0)
    no_object: float = Field(0.1, ge=0)  # weight of unmatched queries in the contrastive terms


@dataclass(frozen=True)
class LossBreakdown:
    l_b: float
    l_g: float
    l_c_o: float
    l_c_i: float
    w_b: float
    w_g: float
    w_c_o: float
    w_c_i: float
    tau: float

    @property
    def contributions(self) -> dict[str, float]:
        """Weighted term values; ``total`` is their sum in this order."""
        return {"box": self.w_b * self.l_b, "giou": self.w_g * self.l_g,
                "object": self.w_c_o * self.l_c_o, "interaction": self.w_c_i * self.l_c_i}

    @property
    def total(self) -> float:
        c = self.contributions
        return c["box"] + c["giou"] + c["object"] + c["interaction"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def contrastive_loss(similarities: torch.Tensor, tau, targets=None, weights=None) -> torch.Tensor:
    """Mean over rows of -log softmax(S / tau)[positive].

    Positives sit on the diagonal unless ``targets`` gives a column per row;
    ``weights`` turns the mean into a weighted mean. Rows are shifted by their
    max before exponentiation.
    """
    tau_t = torch.as_tensor(tau, dtype=similarities.dtype)
    if not bool(tau_t > 0):
        raise ValueError(f"temperature must be positive, got {float(tau_t)}")
    if similarities.dim() != 2 or similarities.shape[0] == 0:
        raise ValueError("similarities must be a non-empty matrix")
    logits = similarities / tau_t
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_norm = torch.logsumexp(logits, dim=1)
    if targets is None:
        if similarities.shape[0] != similarities.shape[1]:
            raise ValueError("square matrix needed when positives are on the diagonal")
        targets = torch.arange(similarities.shape[0])
    targets = torch.as_tensor(targets, dtype=torch.long)
    per_row = log_norm - logits.gather(1, targets[:, None]).squeeze(1)
    if weights is None:
        return per_row.mean()
    w = torch.as_tensor(weights, dtype=similarities.dtype)
    return (per_row * w).sum() / w.sum()


@dataclass
class Targets:
    """Ground truth of one image expressed in bank columns."""

    human: torch.Tensor  # (M, 4) cxcywh
    object: torch.Tensor  # (M, 4)
    object_cols: torch.Tensor  # (M,) long
    interaction_cols: torch.Tensor  # (M,) long

    def __len__(self) -> int:
        return self.human.shape[0]


def build_targets(annotations, object_ids, interaction_ids, label_space, dtype=torch.float32) -> Targets:
    """Triplet annotations -> bank columns; raises KeyError when a category is missing from a bank."""
    obj_col = {c: j for j, c in enumerate(object_ids)}
    int_col = {c: j for j, c in enumerate(interaction_ids)}
    h, o, oc, ic = [], [], [], []
    for t in annotations:
        hoi = label_space.hoi_id(t.verb_class, t.object_class)
        if t.object_class not in obj_col:
            raise KeyError(f"ground-truth object {t.object_class} missing from the object bank")
        if hoi not in int_col:
            raise KeyError(f"ground-truth interaction {hoi} missing from the interaction bank")
        h.append(t.human.as_array())
        o.append(t.object.as_array())
        oc.append(obj_col[t.object_class])
        ic.append(int_col[hoi])
    return Targets(
        torch.tensor(np.array(h), dtype=dtype).reshape(-1, 4),
        torch.tensor(np.array(o), dtype=dtype).reshape(-1, 4),
        torch.tensor(oc, dtype=torch.long),
        torch.tensor(ic, dtype=torch.long),
    )


def match_batch(output, targets: list[Targets], weights: LossWeights) -> list[MatchResult]:
    results = []
    with torch.no_grad():
        p_o, p_i = output.object_probs, output.interaction_probs
        for b, tg in enumerate(targets):
            if len(tg) == 0:
                results.append(MatchResult((), 0.0))
                continue
            cost = match_cost(
                output.human_boxes[b], output.object_boxes[b], p_o[b], p_i[b],
                tg.human.to(p_o.dtype), tg.object.to(p_o.dtype), tg.object_cols, tg.interaction_cols, weights,
            )
            results.append(hungarian_match(cost.double().cpu().numpy()))
    return results


def object_and_interaction_contrastive(output, targets: list[Targets], matches: list[MatchResult], no_object: float):
    """Per-query InfoNCE over bank columns (+ background column), for objects and for interactions.

    Matched queries use their ground-truth column; the rest target the
    background column with weight ``no_object``.
    """
    b, n, k_o = output.object_similarity.shape
    k_i = output.interaction_similarity.shape[2]
    obj_t = torch.full((b, n), k_o - 1, dtype=torch.long)
    int_t = torch.full((b, n), k_i - 1, dtype=torch.long)
    w = torch.full((b, n), no_object, dtype=output.object_similarity.dtype)
    for i, (tg, m) in enumerate(zip(targets, matches)):
        if len(m):
            q, g = torch.tensor(m.queries), torch.tensor(m.targets)
            obj_t[i, q] = tg.object_cols[g]
            int_t[i, q] = tg.interaction_cols[g]
            w[i, q] = 1.0
    l_o = contrastive_loss(output.object_similarity.reshape(b * n, k_o), output.tau, obj_t.reshape(-1), w.reshape(-1))
    l_i = contrastive_loss(
        output.interaction_similarity.reshape(b * n, k_i), output.tau, int_t.reshape(-1), w.reshape(-1)
    )
    return l_o, l_i


def box_losses(output, targets: list[Targets], matches: list[MatchResult]):
    """Mean over matched triplets of (L1_h + L1_o) and of ((1 - GIoU_h) + (1 - GIoU_o))."""
    dtype = output.human_boxes.dtype
    l1_terms, giou_terms = [], []
    for b, (tg, m) in enumerate(zip(targets, matches)):
        if not len(m):
            continue
        q = torch.tensor(m.queries)
        g = torch.tensor(m.targets)
        ph, po = output.human_boxes[b, q], output.object_boxes[b, q]
        th, to = tg.human[g].to(dtype), tg.object[g].to(dtype)
        l1_terms.append((ph - th).abs().sum(-1) + (po - to).abs().sum(-1))
        gh = torch.diagonal(generalized_box_iou(cxcywh_to_xyxy(ph), cxcywh_to_xyxy(th)))
        go = torch.diagonal(generalized_box_iou(cxcywh_to_xyxy(po), cxcywh_to_xyxy(to)))
        giou_terms.append((1 - gh) + (1 - go))
    if not l1_terms:
        zero = output.human_boxes.sum() * 0
        return zero, zero
    return torch.cat(l1_terms).mean(), torch.cat(giou_terms).mean()


def total_loss(output, targets: list[Targets], weights: LossWeights = LossWeights(), matches=None):
    """-> (differentiable total, LossBreakdown, matches)."""
    for name in ("human_boxes", "object_boxes", "object_similarity", "interaction_similarity"):
        if not bool(torch.isfinite(getattr(output, name)).all()):
            raise FloatingPointError(f"non-finite model output {name}")
    if matches is None:
        matches = match_batch(output, targets, weights)
    l_b, l_g = box_losses(output, targets, matches)
    l_o, l_i = object_and_interaction_contrastive(output, targets, matches, weights.no_object)
    total = weights.box * l_b + weights.giou * l_g + weights.object * l_o + weights.interaction * l_i
    breakdown = LossBreakdown(
        l_b.item(), l_g.item(), l_o.item(), l_i.item(),
        weights.box, weights.giou, weights.object, weights.interaction, output.tau.item(),
    )
    for name in ("l_b", "l_g", "l_c_o", "l_c_i"):
        if not math.isfinite(getattr(breakdown, name)):
            raise FloatingPointError(f"non-finite loss term {name}")
    return total, breakdown, matches
