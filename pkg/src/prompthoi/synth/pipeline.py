"""Compose -> render -> label -> filter, with tail-targeted category sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ..data import HOIDataset, Sample
from ..label_space import RarityStats, UnifiedLabelSpace
from ..records import TripletAnnotation
from .prompts import HOIPrompt, PhrasePools, compose_hoiprompt
from .world import (
    ARCHETYPES,
    GAZE_COMPATIBLE,
    GLYPHS,
    Placement,
    SceneRejected,
    SceneSpec,
    relation_offset,
    render_scene,
    toy_hois,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    canvas: int = 64
    second_pair_prob: float = 0.35
    multi_verb_prob: float = 0.15
    occlusion_budget: float = 0.0
    max_attempts: int = 60
    pools: PhrasePools = field(default_factory=PhrasePools)

    def to_dict(self) -> dict:
        return {
            "canvas": self.canvas,
            "second_pair_prob": self.second_pair_prob,
            "multi_verb_prob": self.multi_verb_prob,
            "occlusion_budget": self.occlusion_budget,
            "max_attempts": self.max_attempts,
            "pools": self.pools.to_dict(),
        }


@dataclass
class SynthSample:
    image_id: str
    image: np.ndarray
    annotations: list[TripletAnnotation]
    prompt: HOIPrompt
    spec: SceneSpec
    quality_score: float | None = None

    def to_sample(self) -> Sample:
        return Sample(self.image_id, self.image, self.annotations, self.prompt.sentence, self.quality_score)


def toy_label_space() -> UnifiedLabelSpace:
    """The label space of the procedural world: 8 objects, 6 verbs, 40 HOI categories."""
    from .world import VERBS

    return UnifiedLabelSpace.from_terms(sorted(GLYPHS), VERBS, toy_hois())


def renderable_hois(space: UnifiedLabelSpace) -> np.ndarray:
    ok = [
        space.objects[o] in GLYPHS and a < len(space.actions) and space.actions[a] in {v for v, _ in toy_hois()}
        for a, o in space.hois
    ]
    return np.asarray(ok, dtype=bool)


def _place_pair(rng, spec: SceneSpec, archetype: str, obj_term: str, verbs: Sequence[str]) -> bool:
    hw, hh = ARCHETYPES[archetype]["size"]
    size = GLYPHS[obj_term]["size"]
    for _ in range(60):
        x = int(rng.integers(0, spec.width - hw + 1))
        y = int(rng.integers(0, spec.height - hh + 1))
        human = Placement(x, y, x + hw, y + hh, archetype)
        ox, oy = relation_offset(verbs[0], human, size)
        obj = Placement(ox, oy, ox + size[0], oy + size[1], obj_term)
        trial = replace(spec, actors=spec.actors + [human], objects=spec.objects + [obj])
        try:
            trial.validate()
        except SceneRejected:
            continue
        a, o = len(spec.actors), len(spec.objects)
        spec.actors.append(human)
        spec.objects.append(obj)
        for v in verbs:
            spec.links.append((a, o, spec.action_terms.index(v)))
        return True
    return False


def _verbs_for(rng, space: UnifiedLabelSpace, action: int, obj: int, cfg: SynthConfig) -> list[str]:
    verb = space.actions[action]
    verbs = [verb]
    if verb in GAZE_COMPATIBLE and "look at" in space.actions and rng.random() < cfg.multi_verb_prob:
        look = space.actions.index("look at")
        if space.has_hoi(look, obj):
            verbs.append("look at")
    return verbs


def plan_scene(prompt: HOIPrompt, space: UnifiedLabelSpace, rng, cfg: SynthConfig, extra=None) -> SceneSpec:
    """Lay out the prompt's pair, plus an optional extra (action, object, archetype) pair."""
    spec = SceneSpec(
        cfg.canvas,
        cfg.canvas,
        [],
        [],
        [],
        seed=int(rng.integers(2**31)),
        background=prompt.environment,
        style=prompt.photo_info,
        action_terms=tuple(space.actions),
        object_ids={t: i for i, t in enumerate(space.objects)},
        occlusion_budget=cfg.occlusion_budget,
    )
    action, obj = prompt.triplet
    if not _place_pair(rng, spec, prompt.archetype, space.objects[obj], _verbs_for(rng, space, action, obj, cfg)):
        raise SceneRejected(f"could not place {prompt.sentence!r} on a {cfg.canvas}px canvas")
    if extra is not None:
        a2, o2, arch2 = extra
        _place_pair(rng, spec, arch2, space.objects[o2], _verbs_for(rng, space, a2, o2, cfg))
    return spec


def generate_one(
    index: int, weights: np.ndarray, space: UnifiedLabelSpace, seed: int, cfg: SynthConfig, prefix: str = "syn"
) -> SynthSample:
    """Sample ``index`` of a run; depends only on (seed, index), so runs can resume or shard."""
    rng = np.random.default_rng([seed, index])
    p = weights / weights.sum()
    for _ in range(cfg.max_attempts):
        hoi = int(rng.choice(len(p), p=p))
        action, obj = space.hois[hoi]
        prompt = compose_hoiprompt((action, obj), space, rng, cfg.pools)
        extra = None
        if rng.random() < cfg.second_pair_prob:
            h2 = int(rng.choice(len(p), p=p))
            arch = ("man", "woman", "child")[int(rng.integers(3))]
            extra = (space.hois[h2][0], space.hois[h2][1], arch)
        try:
            spec = plan_scene(prompt, space, rng, cfg, extra)
        except SceneRejected:
            continue
        image, anns = render_scene(spec)
        return SynthSample(f"{prefix}{seed}_{index:06d}", image, anns, prompt, spec)
    raise SceneRejected(f"sample {index}: no valid layout after {cfg.max_attempts} attempts")


def generate_samples(n: int, weights, space: UnifiedLabelSpace, seed: int, cfg: SynthConfig = SynthConfig(), prefix="syn"):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(space.hois),):
        raise ValueError("need one weight per HOI category")
    weights = np.where(renderable_hois(space), weights, 0.0)
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    if weights.sum() <= 0:
        raise ValueError("no renderable HOI category has positive weight")
    return [generate_one(i, weights, space, seed, cfg, prefix) for i in range(n)]


def inverse_frequency_weights(rarity: RarityStats, space: UnifiedLabelSpace, observed_only: bool = False) -> np.ndarray:
    """Weight of category c is 1 / (count_c + 1)."""
    counts = np.array([rarity.counts.get(c, 0) for c in range(len(space.hois))], dtype=np.float64)
    w = 1.0 / (counts + 1.0)
    if observed_only:
        w = np.where(counts > 0, w, 0.0)
    return w


def generate_dataset(
    n: int,
    rarity_stats: RarityStats,
    label_space: UnifiedLabelSpace,
    seed: int,
    cfg: SynthConfig = SynthConfig(),
    observed_only: bool = False,
) -> list[SynthSample]:
    """Tail-targeted generation: categories drawn with probability proportional to 1/(count+1)."""
    w = inverse_frequency_weights(rarity_stats, label_space, observed_only)
    return generate_samples(n, w, label_space, seed, cfg)


def zipf_weights(n_categories: int, exponent: float, seed: int = 0) -> np.ndarray:
    """Zipf weights over a seeded random ordering of the categories."""
    ranks = np.random.default_rng(seed).permutation(n_categories) + 1
    return 1.0 / ranks.astype(np.float64) ** exponent


def generate_corpus(
    n: int,
    label_space: UnifiedLabelSpace,
    seed: int,
    weights=None,
    cfg: SynthConfig = SynthConfig(),
    prefix: str = "img",
) -> HOIDataset:
    """A plain toy corpus (uniform over categories unless ``weights`` given)."""
    if weights is None:
        weights = np.ones(len(label_space.hois))
    samples = generate_samples(n, weights, label_space, seed, cfg, prefix)
    return HOIDataset(label_space, [s.to_sample() for s in samples])


@dataclass
class FilterResult:
    kept: list
    scores: list[float]
    mean_kept_score: float | None


def filter_samples(samples: Sequence, score_fn: Callable[[object], float], threshold: float) -> FilterResult:
    """Keep samples whose score is >= ``threshold``; kept samples are returned untouched."""
    scores = [float(score_fn(s)) for s in samples]
    for sc in scores:
        if not 0.0 <= sc <= 1.0:
            raise ValueError(f"score {sc} outside [0, 1]")
    kept = [s for s, sc in zip(samples, scores) if sc >= threshold]
    kept_scores = [sc for sc in scores if sc >= threshold]
    mean = float(np.mean(kept_scores)) if kept_scores else None
    if not kept and samples:
        log.warning("filter kept 0 of %d samples at threshold %.3f", len(samples), threshold)
    return FilterResult(kept, scores, mean)
