"""Procedural toy world: glyph archetypes, relation rules and the scene renderer.

Every glyph is drawn in a colour reserved for its category and fills its
placement rectangle edge to edge, so annotations taken from placements are
exact. Verbs are encoded as the spatial relation between a person and an
object (contact or a gap at a verb-specific offset); "look at" additionally
draws a gaze line from the head towards the object.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from ..boxes import Box
from ..records import TripletAnnotation


class SceneRejected(ValueError):
    """Raised when placements leave the canvas or overlap beyond the occlusion budget."""


# reserved, saturated colours; the background never reaches these values
ARCHETYPES = {
    "man": {"color": (30, 60, 220), "size": (12, 26)},
    "woman": {"color": (210, 30, 170), "size": (11, 24)},
    "child": {"color": (240, 130, 10), "size": (9, 17)},
}

GLYPHS = {
    "ball": {"shape": "ellipse", "color": (230, 20, 20), "size": (8, 8)},
    "bike": {"shape": "bike", "color": (20, 200, 60), "size": (18, 11)},
    "book": {"shape": "book", "color": (140, 20, 230), "size": (8, 10)},
    "cup": {"shape": "cup", "color": (250, 230, 20), "size": (7, 8)},
    "kite": {"shape": "diamond", "color": (20, 220, 230), "size": (11, 11)},
    "phone": {"shape": "rect", "color": (10, 10, 10), "size": (5, 9)},
    "skateboard": {"shape": "board", "color": (250, 120, 200), "size": (17, 5)},
    "umbrella": {"shape": "umbrella", "color": (120, 250, 10), "size": (13, 11)},
}

GAZE_COLOR = (255, 255, 255)

VERBS = ("carry", "hold", "kick", "look at", "ride", "throw")

# (verb, object) combinations the toy world never shows
EXCLUDED = {
    ("ride", "book"),
    ("ride", "cup"),
    ("ride", "phone"),
    ("ride", "kite"),
    ("kick", "umbrella"),
    ("kick", "phone"),
    ("kick", "cup"),
    ("throw", "bike"),
}

# verbs whose placement can co-occur with a gaze line (multi-verb pairs)
GAZE_COMPATIBLE = ("carry", "hold", "throw")

ENVIRONMENT_COLORS = {
    "in a park": (112, 140, 108),
    "in a kitchen": (150, 138, 120),
    "on a street": (108, 108, 120),
    "at the beach": (168, 158, 128),
    "in an office": (128, 130, 146),
}

PHOTO_STYLES = ("daylight photo", "film photo", "studio photo", "wide-angle photo", "close-up photo")


def toy_hois() -> list[tuple[str, str]]:
    return [(v, o) for v in VERBS for o in sorted(GLYPHS) if (v, o) not in EXCLUDED]


@dataclass(frozen=True)
class Placement:
    x0: int
    y0: int
    x1: int
    y1: int
    kind: str  # archetype name or object term

    def box(self, width: int, height: int) -> Box:
        return Box.from_corners(self.x0 / width, self.y0 / height, self.x1 / width, self.y1 / height)

    def inside(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height


@dataclass
class SceneSpec:
    width: int
    height: int
    actors: list[Placement]
    objects: list[Placement]
    # (actor index, object index, action id)
    links: list[tuple[int, int, int]]
    seed: int
    background: str = "in a park"
    style: str = "daylight photo"
    action_terms: tuple[str, ...] = VERBS
    object_ids: dict[str, int] = field(default_factory=dict)
    occlusion_budget: float = 0.0

    def validate(self) -> None:
        for p in self.actors + self.objects:
            if not p.inside(self.width, self.height):
                raise SceneRejected(f"placement {p} leaves the {self.width}x{self.height} canvas")
        for a, o, v in self.links:
            if not (0 <= a < len(self.actors) and 0 <= o < len(self.objects)):
                raise SceneRejected(f"link ({a}, {o}) references a missing placement")
            if not 0 <= v < len(self.action_terms):
                raise SceneRejected(f"unknown action id {v}")
        rects = self.actors + self.objects
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                if _overlap_fraction(rects[i], rects[j]) > self.occlusion_budget:
                    raise SceneRejected(f"{rects[i].kind} and {rects[j].kind} overlap beyond budget")


def _overlap_fraction(a: Placement, b: Placement) -> float:
    iw = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    smaller = min((a.x1 - a.x0) * (a.y1 - a.y0), (b.x1 - b.x0) * (b.y1 - b.y0))
    return iw * ih / smaller


def relation_offset(verb: str, human: Placement, size: tuple[int, int]) -> tuple[int, int]:
    """Top-left pixel of an object of ``size`` placed relative to ``human`` for ``verb``."""
    w, h = size
    hw, hh = human.x1 - human.x0, human.y1 - human.y0
    if verb == "hold":
        return human.x1, human.y0 + hh // 2 - h // 2
    if verb == "carry":
        return human.x0 + hw // 2 - w // 2, human.y0 - h
    if verb == "ride":
        return human.x0 + hw // 2 - w // 2, human.y1
    if verb == "kick":
        return human.x1, human.y1 - h
    if verb == "throw":
        return human.x1 + 5, human.y0 - h + 2
    if verb == "look at":
        return human.x0 - 9 - w, human.y0
    raise KeyError(f"no relation rule for verb '{verb}'")


def _draw_human(draw: ImageDraw.ImageDraw, p: Placement):
    c = ARCHETYPES[p.kind]["color"]
    w, h = p.x1 - p.x0, p.y1 - p.y0
    head = max(3, w // 2)
    hx0 = p.x0 + (w - head) // 2
    draw.ellipse([hx0, p.y0, hx0 + head - 1, p.y0 + head - 1], fill=c)
    neck = p.x0 + w // 2
    draw.rectangle([neck - 1, p.y0 + head - 1, neck, p.y0 + head], fill=c)
    torso_bottom = p.y0 + int(h * 0.65)
    draw.rectangle([p.x0, p.y0 + head, p.x1 - 1, torso_bottom], fill=c)
    leg = max(2, w // 3)
    draw.rectangle([p.x0 + 1, torso_bottom, p.x0 + leg, p.y1 - 1], fill=c)
    draw.rectangle([p.x1 - 1 - leg, torso_bottom, p.x1 - 2, p.y1 - 1], fill=c)


def _draw_object(draw: ImageDraw.ImageDraw, p: Placement):
    g = GLYPHS[p.kind]
    c, shape = g["color"], g["shape"]
    x0, y0, x1, y1 = p.x0, p.y0, p.x1 - 1, p.y1 - 1
    w, h = p.x1 - p.x0, p.y1 - p.y0
    if shape == "ellipse":
        draw.ellipse([x0, y0, x1, y1], fill=c)
    elif shape == "rect":
        draw.rectangle([x0, y0, x1, y1], fill=c)
    elif shape == "book":
        draw.rectangle([x0, y0, x1, y1], fill=c)
        draw.rectangle([x0 + 2, y0 + 2, x1 - 2, y0 + 3], fill=(255, 255, 255))
    elif shape == "cup":
        draw.rectangle([x0, y0, x1 - 2, y1], fill=c)
        draw.rectangle([x1 - 1, y0 + 2, x1, y1 - 3], fill=c)
    elif shape == "diamond":
        mx, my = x0 + w // 2, y0 + h // 2
        draw.polygon([(mx, y0), (x1, my), (mx, y1), (x0, my)], fill=c)
    elif shape == "bike":
        r = h // 2
        draw.ellipse([x0, y1 - 2 * r, x0 + 2 * r, y1], fill=c)
        draw.ellipse([x1 - 2 * r, y1 - 2 * r, x1, y1], fill=c)
        draw.rectangle([x0 + r, y0, x1 - r, y0 + 2], fill=c)
        draw.line([(x0 + r, y0), (x0 + r, y1 - r)], fill=c, width=2)
    elif shape == "board":
        draw.rectangle([x0, y0, x1, y0 + 2], fill=c)
        draw.rectangle([x0 + 2, y1 - 1, x0 + 4, y1], fill=c)
        draw.rectangle([x1 - 4, y1 - 1, x1 - 2, y1], fill=c)
    elif shape == "umbrella":
        draw.pieslice([x0, y0, x1, y0 + 2 * (h // 2)], 180, 360, fill=c)
        mx = x0 + w // 2
        draw.rectangle([mx, y0 + h // 2, mx + 1, y1], fill=c)
    else:
        raise KeyError(shape)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    base = np.array(ENVIRONMENT_COLORS.get(spec.background, (128, 128, 128)), dtype=np.float64)
    hgt, wid = spec.height, spec.width
    img = np.broadcast_to(base, (hgt, wid, 3)).copy()
    yy, xx = np.mgrid[0:hgt, 0:wid]
    style = spec.style
    if style == "film photo":
        img += rng.normal(0, 8, img.shape)
    elif style == "studio photo":
        img += ((yy / hgt) - 0.5)[..., None] * 30
    elif style == "wide-angle photo":
        img += (((xx // 4) % 2) * 12 - 6)[..., None]
    elif style == "close-up photo":
        r = np.hypot(xx / wid - 0.5, yy / hgt - 0.5)
        img -= (r * 40)[..., None]
    else:
        img += rng.normal(0, 3, img.shape)
    # keep clear of the reserved glyph colours
    return np.clip(np.rint(img), 70, 200).astype(np.uint8)


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, list[TripletAnnotation]]:
    """Draw a scene and derive its annotations from the placement log.

    Returns an ``(H, W, 3)`` uint8 raster and one triplet per link.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    canvas = Image.fromarray(_background(spec, rng))
    draw = ImageDraw.Draw(canvas)
    look = spec.action_terms.index("look at") if "look at" in spec.action_terms else -1
    for a, o, v in spec.links:
        if v == look:
            hp, op = spec.actors[a], spec.objects[o]
            head_y = hp.y0 + (hp.x1 - hp.x0) // 4
            target = ((op.x0 + op.x1) // 2, (op.y0 + op.y1) // 2)
            draw.line([((hp.x0 + hp.x1) // 2, head_y), target], fill=GAZE_COLOR, width=1)
    for p in spec.objects:
        _draw_object(draw, p)
    for p in spec.actors:
        _draw_human(draw, p)
    image = np.asarray(canvas, dtype=np.uint8).copy()

    anns = []
    for a, o, v in spec.links:
        obj = spec.objects[o]
        if obj.kind not in spec.object_ids:
            raise SceneRejected(f"object '{obj.kind}' has no id in the active label space")
        anns.append(
            TripletAnnotation(
                spec.actors[a].box(spec.width, spec.height),
                obj.box(spec.width, spec.height),
                spec.object_ids[obj.kind],
                v,
            )
        )
    return image, anns


def glyph_mask(image: np.ndarray, kind: str) -> np.ndarray:
    color = ARCHETYPES[kind]["color"] if kind in ARCHETYPES else GLYPHS[kind]["color"]
    return np.all(image == np.array(color, dtype=np.uint8), axis=-1)
