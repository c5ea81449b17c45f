"""Per-iteration prompt-modality draws and visual-prompt pair sampling."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

TEXT, VISUAL = "text", "visual"


def sample_prompt_modality(rng: np.random.Generator, visual_prob: float = 0.5) -> str:
    if not 0.0 <= visual_prob <= 1.0:
        raise ValueError("visual_prob must lie in [0, 1]")
    return VISUAL if rng.random() < visual_prob else TEXT


class NoVisualPair(ValueError):
    pass


def category_signature(annotations, label_space) -> tuple[int, ...]:
    """Sorted set of HOI category ids in an image (this fixes its object set as well)."""
    return tuple(sorted({label_space.hoi_id(t.verb_class, t.object_class) for t in annotations}))


class SignatureIndex:
    """Images grouped by category-set signature; only groups of two or more can supply pairs."""

    def __init__(self, dataset):
        groups = defaultdict(list)
        for i, s in enumerate(dataset.samples):
            if s.annotations:
                groups[category_signature(s.annotations, dataset.label_space)].append(i)
        self.groups = dict(sorted(groups.items()))
        self.pairable = [sig for sig, idx in self.groups.items() if len(idx) >= 2]

    def __len__(self) -> int:
        return len(self.pairable)


def sample_visual_prompt_pair(index: SignatureIndex, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform signature among pairable ones, then two distinct images: (prompt, target)."""
    if not index.pairable:
        raise NoVisualPair("no category-set signature has two images; use the textual modality instead")
    sig = index.pairable[int(rng.integers(len(index.pairable)))]
    members = index.groups[sig]
    a, b = rng.choice(len(members), size=2, replace=False)
    return members[int(a)], members[int(b)]
