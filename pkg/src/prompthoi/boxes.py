"""Normalized box arithmetic shared by the evaluator, the renderer and the losses.

Boxes are stored center-format ``(cx, cy, w, h)`` in image-normalized units.
Corner format ``(x0, y0, x1, y1)`` only appears at serialization boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    # exact corners when built from corner format, so re-serialization is byte-stable
    _xyxy: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0,1]: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size outside (0,1]: {vals}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        xyxy = (float(x0), float(y0), float(x1), float(y1))
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, xyxy)

    def corners(self) -> tuple[float, float, float, float]:
        if self._xyxy is not None:
            return self._xyxy
        hw, hh = self.w / 2, self.h / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


def cxcywh_to_xyxy(boxes):
    """Works for numpy arrays and torch tensors with a trailing dim of 4."""
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    parts = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
    if isinstance(boxes, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def xyxy_to_cxcywh(boxes):
    x0, y0, x1, y1 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    parts = [(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0]
    if isinstance(boxes, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def _as_xyxy(box) -> np.ndarray:
    if isinstance(box, Box):
        return np.array(box.corners(), dtype=np.float64)
    return cxcywh_to_xyxy(np.asarray(box, dtype=np.float64))


def _iou_and_hull(a: np.ndarray, b: np.ndarray):
    """a: (..., 4), b: (..., 4) xyxy, broadcast. Returns (iou, union, hull_area)."""
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    identical = np.all(a == b, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    # zero-area boxes: IoU 0 unless both are the same box
    iou = np.where(identical, 1.0, iou)
    return iou, union, hull


def iou(a, b) -> float:
    """IoU of two boxes (``Box`` or cxcywh sequences)."""
    v, _, _ = _iou_and_hull(_as_xyxy(a), _as_xyxy(b))
    return float(v)


def giou(a, b) -> float:
    """Generalized IoU: IoU minus the fraction of the hull not covered by the union."""
    xa, xb = _as_xyxy(a), _as_xyxy(b)
    v, union, hull = _iou_and_hull(xa, xb)
    if np.all(xa == xb):
        return 1.0
    if hull <= 0:
        return float(v)
    return float(v - (hull - union) / hull)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N,4) x (M,4) cxcywh -> (N,M) IoU matrix."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    v, _, _ = _iou_and_hull(a[:, None, :], b[None, :, :])
    return v


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable pairwise GIoU for xyxy tensors, (N,4) x (M,4) -> (N,M)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou_ = inter / union
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou_ - (hull - union) / hull
