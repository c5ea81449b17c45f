"""Bipartite matching between query predictions and ground-truth triplets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .boxes import generalized_box_iou, cxcywh_to_xyxy


@dataclass(frozen=True)
class MatchResult:
    assignment: tuple[tuple[int, int], ...]  # (query index, ground-truth index), sorted by query
    cost: float

    def __len__(self) -> int:
        return len(self.assignment)

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.assignment]

    @property
    def targets(self) -> list[int]:
        return [g for _, g in self.assignment]


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return math.fsum(cost[r, c])


def hungarian_match(cost, tol: float = 1e-12) -> MatchResult:
    """Minimum-cost assignment of size min(N, M).

    Among optimal assignments the lexicographically smallest one is returned:
    walking the shorter side in index order, each element takes the smallest
    partner that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult((), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    transposed = n > m
    c = cost.T if transposed else cost  # rows are now the shorter side
    best = _optimum(c)
    slack = tol * max(1.0, abs(best))
    rows = list(range(c.shape[0]))
    free_cols = list(range(c.shape[1]))
    r0, c0 = linear_sum_assignment(c)
    partner = dict(zip(r0.tolist(), c0.tolist()))
    fixed_cost = 0.0
    pairs = []
    for i in rows:
        rest = rows[i + 1:]
        # while every earlier choice agrees with the solver's optimum, its partner for i is feasible
        consistent = all(partner[r] == col for r, col in pairs)
        chosen = None
        for j in free_cols:
            if consistent and j == partner[i]:
                chosen = j
                break
            others = [col for col in free_cols if col != j]
            sub = c[np.ix_(rest, others)]
            bound = fixed_cost + c[i, j] + (sub.min(axis=1).sum() if rest else 0.0)
            if bound > best + slack:
                continue
            if fixed_cost + c[i, j] + _optimum(sub) <= best + slack:
                chosen = j
                break
        if chosen is None:  # numerical corner: keep the solver's partner
            chosen = partner[i]
        pairs.append((i, chosen))
        fixed_cost += c[i, chosen]
        free_cols.remove(chosen)
    if transposed:
        pairs = [(q, g) for g, q in pairs]
    pairs.sort()
    total = math.fsum(cost[q, g] for q, g in pairs)
    return MatchResult(tuple(pairs), total)


def brute_force_min(cost) -> float:
    """Exhaustive minimum over all injective maps of the shorter side (test oracle)."""
    import itertools

    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    n, m = cost.shape
    return min(math.fsum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))


def match_cost(
    pred_human: torch.Tensor,
    pred_object: torch.Tensor,
    object_probs: torch.Tensor,
    interaction_probs: torch.Tensor,
    gt_human: torch.Tensor,
    gt_object: torch.Tensor,
    gt_object_cols: torch.Tensor,
    gt_interaction_cols: torch.Tensor,
    weights,
) -> torch.Tensor:
    """(N, M) matching cost for one image; boxes in cxcywh, columns index the bank distributions.

    cost = w_b (L1_h + L1_o) - w_g (GIoU_h + GIoU_o) - w_co P_o[gt object] - w_ci P_i[gt interaction]
    """
    l1 = torch.cdist(pred_human, gt_human, p=1) + torch.cdist(pred_object, gt_object, p=1)
    giou = generalized_box_iou(cxcywh_to_xyxy(pred_human), cxcywh_to_xyxy(gt_human)) + generalized_box_iou(
        cxcywh_to_xyxy(pred_object), cxcywh_to_xyxy(gt_object)
    )
    return (
        weights.box * l1
        - weights.giou * giou
        - weights.object * object_probs[:, gt_object_cols]
        - weights.interaction * interaction_probs[:, gt_interaction_cols]
    )
