"""In-memory HOI datasets and their on-disk layout.

A dataset directory holds::

    label_space.json     unified label space
    annotations.jsonl    triplet records (see ``records``)
    prompts.jsonl        optional: {"image_id", "prompt", "quality_score"} per image
    images/<id>.png      lossless rasters
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .label_space import RarityStats, UnifiedLabelSpace, rarity_split
from .records import TripletAnnotation, read_records, write_records


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # (H, W, 3) uint8
    annotations: list[TripletAnnotation] = field(default_factory=list)
    prompt: str | None = None
    quality_score: float | None = None


@dataclass
class HOIDataset:
    label_space: UnifiedLabelSpace
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def rarity(self, threshold: int = 10) -> RarityStats:
        return rarity_split((t for s in self.samples for t in s.annotations), self.label_space, threshold)

    def subset(self, indices) -> "HOIDataset":
        return HOIDataset(self.label_space, [self.samples[i] for i in indices])

    def __add__(self, other: "HOIDataset") -> "HOIDataset":
        if other.label_space.fingerprint() != self.label_space.fingerprint():
            raise ValueError("cannot concatenate datasets over different label spaces")
        return HOIDataset(self.label_space, self.samples + other.samples)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack uint8 HWC rasters into a float (B, 3, H, W) tensor in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype) / 255.0


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_dataset(out_dir, dataset: HOIDataset, extra_files: dict[str, str] | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    dataset.label_space.save(out / "label_space.json")
    write_records(out / "annotations.jsonl", {s.image_id: s.annotations for s in dataset.samples})
    lines = []
    for s in dataset.samples:
        save_png(out / "images" / f"{s.image_id}.png", s.image)
        lines.append(json.dumps({"image_id": s.image_id, "prompt": s.prompt, "quality_score": s.quality_score}))
    (out / "prompts.jsonl").write_text("".join(line + "\n" for line in lines))
    for name, text in (extra_files or {}).items():
        (out / name).write_text(text)


def load_dataset(path) -> HOIDataset:
    root = Path(path)
    space = UnifiedLabelSpace.load(root / "label_space.json")
    records = read_records(root / "annotations.jsonl")
    meta = {}
    if (root / "prompts.jsonl").exists():
        for line in (root / "prompts.jsonl").read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                meta[rec["image_id"]] = rec
    ids = list(meta) if meta else list(records)
    samples = []
    for image_id in ids:
        rec = meta.get(image_id, {})
        samples.append(
            Sample(
                image_id,
                load_png(root / "images" / f"{image_id}.png"),
                records.get(image_id, []),
                rec.get("prompt"),
                rec.get("quality_score"),
            )
        )
    return HOIDataset(space, samples)
