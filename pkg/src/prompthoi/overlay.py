"""Detection overlays: upscaled raster with box outlines and one label per triplet."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .label_space import UnifiedLabelSpace

RANK_COLORS = ((255, 255, 0), (0, 255, 255), (255, 0, 255), (255, 128, 0), (128, 255, 128))


def box_pixels(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive pixel rectangle of a normalized box on a width x height canvas."""
    x0, y0, x1, y1 = box.corners()
    px0 = int(np.clip(round(x0 * width), 0, width - 1))
    py0 = int(np.clip(round(y0 * height), 0, height - 1))
    px1 = int(np.clip(round(x1 * width) - 1, px0, width - 1))
    py1 = int(np.clip(round(y1 * height) - 1, py0, height - 1))
    return px0, py0, px1, py1


def label_text(det, space: UnifiedLabelSpace) -> str:
    return f"{space.actions[det.verb_class]} {space.objects[det.object_class]} {det.score:.2f}"


def render_overlay(image: np.ndarray, detections, space: UnifiedLabelSpace, scale: int = 4) -> np.ndarray:
    """Nearest-neighbour upscale, then per detection: human and object outlines plus a text label.

    Labels are stacked in the top-left corner in rank order, in the rank's colour.
    """
    h, w = image.shape[:2]
    canvas = Image.fromarray(image).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default_imagefont()
    W, H = canvas.size
    for rank, det in enumerate(detections):
        color = RANK_COLORS[rank % len(RANK_COLORS)]
        draw.rectangle(box_pixels(det.human, W, H), outline=color, width=1)
        draw.rectangle(box_pixels(det.object, W, H), outline=color, width=1)
    for rank, det in enumerate(detections):
        color = RANK_COLORS[rank % len(RANK_COLORS)]
        draw.text((2, 2 + 11 * rank), label_text(det, space), fill=color, font=font)
    return np.asarray(canvas, dtype=np.uint8).copy()
