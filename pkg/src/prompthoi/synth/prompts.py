"""Five-slot HOI prompts: person, verb, object, environment and photographic style."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..label_space import UnifiedLabelSpace
from ..text import article, verb_ing
from .world import ENVIRONMENT_COLORS, PHOTO_STYLES


@dataclass(frozen=True)
class PhrasePools:
    person: tuple[str, ...] = ("a man", "a woman", "a child", "an old man", "a young woman")
    object_adjective: tuple[str, ...] = ("small", "new", "old", "plain", "shiny")
    environment: tuple[str, ...] = tuple(ENVIRONMENT_COLORS)
    photo: tuple[str, ...] = PHOTO_STYLES

    def __post_init__(self):
        for name in ("person", "object_adjective", "environment", "photo"):
            if not getattr(self, name):
                raise ValueError(f"phrase pool '{name}' is empty")

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("person", "object_adjective", "environment", "photo")}


@dataclass(frozen=True)
class HOIPrompt:
    person_desc: str
    verb: str
    object_desc: str
    environment: str
    photo_info: str
    triplet: tuple[int, int] = field(default=(0, 0))  # (action id, object id)

    def __post_init__(self):
        for slot in ("person_desc", "verb", "object_desc", "environment", "photo_info"):
            if not getattr(self, slot):
                raise ValueError(f"empty prompt slot '{slot}'")

    @property
    def sentence(self) -> str:
        return (
            f"{self.person_desc} {verb_ing(self.verb)} {article(self.object_desc)} {self.object_desc}, "
            f"{self.environment}, {self.photo_info}"
        )

    @property
    def archetype(self) -> str:
        words = self.person_desc.split()
        if "child" in words:
            return "child"
        if "woman" in words:
            return "woman"
        return "man"


def compose_hoiprompt(
    triplet: tuple[int, int],
    label_space: UnifiedLabelSpace,
    rng: np.random.Generator,
    pools: PhrasePools = PhrasePools(),
) -> HOIPrompt:
    """Fill the five slots for ``triplet`` = (action id, object id), each pool drawn uniformly."""
    action, obj = triplet
    if not label_space.has_hoi(action, obj):
        raise KeyError(f"({action}, {obj}) is not an HOI category of the label space")

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    return HOIPrompt(
        person_desc=pick(pools.person),
        verb=label_space.actions[action],
        object_desc=f"{pick(pools.object_adjective)} {label_space.objects[obj]}",
        environment=pick(pools.environment),
        photo_info=pick(pools.photo),
        triplet=(action, obj),
    )
