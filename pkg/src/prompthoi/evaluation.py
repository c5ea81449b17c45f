"""HICO-style triplet mAP with Full / Rare / Non-Rare splits.

A prediction is a true positive when its HOI category equals a ground truth's
and both the human and the object boxes overlap that ground truth with
IoU >= ``iou_threshold``. Predictions are processed per category in
descending score order (ties: lower image index, then lower prediction
index). Among still-unmatched eligible ground truths the one with the largest
``min(iou_h, iou_o)`` is taken. AP is the area under the all-point
interpolated precision/recall curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import pairwise_iou
from .label_space import RarityStats, UnifiedLabelSpace, rarity_split


@dataclass
class EvalReport:
    map_full: float
    map_rare: float
    map_nonrare: float
    per_category_ap: dict[int, float] = field(default_factory=dict)
    n_rare: int = 0
    n_nonrare: int = 0

    def to_dict(self) -> dict:
        return {
            "map_full": self.map_full,
            "map_rare": self.map_rare,
            "map_nonrare": self.map_nonrare,
            "n_rare": self.n_rare,
            "n_nonrare": self.n_nonrare,
            "per_category_ap": {str(k): v for k, v in sorted(self.per_category_ap.items())},
        }


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from TP flags already sorted by descending score."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    # precision envelope, non-increasing from the right
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return math.fsum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1])


def _validate(t, space: UnifiedLabelSpace) -> int:
    if not (0 <= t.object_class < len(space.objects)):
        raise KeyError(f"unknown object id {t.object_class}")
    if not (0 <= t.verb_class < len(space.actions)):
        raise KeyError(f"unknown action id {t.verb_class}")
    return space.hoi_id(t.verb_class, t.object_class)


def evaluate_map(
    predictions: Sequence[Sequence],
    gts: Sequence[Sequence],
    label_space: UnifiedLabelSpace,
    iou_threshold: float = 0.5,
    rarity: RarityStats | None = None,
) -> EvalReport:
    """Evaluate per-image prediction lists against per-image ground-truth lists.

    ``rarity`` supplies the training-set rare/non-rare partition. Without it the
    partition is computed from ``gts`` themselves.
    """
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} prediction lists for {len(gts)} images")

    # category -> image -> (human boxes, object boxes)
    gt_by_cat: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
    n_gt: dict[int, int] = {}
    for img, anns in enumerate(gts):
        per_cat: dict[int, list] = {}
        for t in anns:
            per_cat.setdefault(_validate(t, label_space), []).append(t)
        for c, ts in per_cat.items():
            gt_by_cat.setdefault(c, {})[img] = (
                np.array([t.human.as_array() for t in ts]),
                np.array([t.object.as_array() for t in ts]),
            )
            n_gt[c] = n_gt.get(c, 0) + len(ts)

    preds_by_cat: dict[int, list[tuple[float, int, int, object]]] = {}
    for img, preds in enumerate(predictions):
        for k, p in enumerate(preds):
            c = _validate(p, label_space)
            preds_by_cat.setdefault(c, []).append((-p.score, img, k, p))

    per_cat_ap: dict[int, float] = {}
    for c in sorted(n_gt):
        plist = sorted(preds_by_cat.get(c, []), key=lambda r: r[:3])
        used: dict[int, np.ndarray] = {}
        tp = np.zeros(len(plist))
        for r, (_, img, _, p) in enumerate(plist):
            entry = gt_by_cat[c].get(img)
            if entry is None:
                continue
            hb, ob = entry
            taken = used.setdefault(img, np.zeros(len(hb), dtype=bool))
            ih = pairwise_iou(p.human.as_array(), hb)[0]
            io = pairwise_iou(p.object.as_array(), ob)[0]
            ok = (ih >= iou_threshold) & (io >= iou_threshold) & ~taken
            if ok.any():
                overlap = np.where(ok, np.minimum(ih, io), -1.0)
                j = int(np.argmax(overlap))  # first index on ties
                taken[j] = True
                tp[r] = 1.0
        per_cat_ap[c] = average_precision(tp, n_gt[c])

    if rarity is None:
        rarity = rarity_split([t for anns in gts for t in anns], label_space)
    # categories never seen in training count as rare
    rare = [c for c in per_cat_ap if c not in rarity.nonrare_set]
    nonrare = [c for c in per_cat_ap if c in rarity.nonrare_set]

    def mean(cs):
        return math.fsum(per_cat_ap[c] for c in cs) / len(cs) if cs else 0.0

    return EvalReport(mean(list(per_cat_ap)), mean(rare), mean(nonrare), per_cat_ap, len(rare), len(nonrare))
