"""Triplet records and their line-delimited serialization.

One JSON object per line, fields always in this order::

    image_id, human, object, object_class, verb_class[, score]

``human`` and ``object`` are corner-format ``[x0, y0, x1, y1]`` lists in
normalized image units. ``score`` is present for predictions only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .boxes import Box

FIELD_ORDER = ("image_id", "human", "object", "object_class", "verb_class", "score")


@dataclass(frozen=True)
class TripletAnnotation:
    human: Box
    object: Box
    object_class: int
    verb_class: int


@dataclass(frozen=True)
class ScoredTriplet:
    human: Box
    object: Box
    object_class: int
    verb_class: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0:
            raise ValueError(f"score must be finite and >= 0, got {self.score}")


def triplet_to_record(image_id: str, t) -> dict:
    rec = {
        "image_id": image_id,
        "human": list(t.human.corners()),
        "object": list(t.object.corners()),
        "object_class": int(t.object_class),
        "verb_class": int(t.verb_class),
    }
    if isinstance(t, ScoredTriplet):
        rec["score"] = float(t.score)
    return rec


def record_to_triplet(rec: Mapping):
    human = Box.from_corners(*rec["human"])
    obj = Box.from_corners(*rec["object"])
    if "score" in rec:
        return ScoredTriplet(human, obj, int(rec["object_class"]), int(rec["verb_class"]), float(rec["score"]))
    return TripletAnnotation(human, obj, int(rec["object_class"]), int(rec["verb_class"]))


def dumps_records(per_image: Mapping[str, Iterable]) -> str:
    lines = []
    for image_id, triplets in per_image.items():
        for t in triplets:
            lines.append(json.dumps(triplet_to_record(image_id, t)))
    return "".join(line + "\n" for line in lines)


def write_records(path, per_image: Mapping[str, Iterable]) -> None:
    Path(path).write_text(dumps_records(per_image))


def read_records(path) -> dict[str, list]:
    """Read a record file into ``{image_id: [triplet, ...]}`` preserving file order."""
    out: dict[str, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record") from exc
            out.setdefault(rec["image_id"], []).append(record_to_triplet(rec))
    return out
