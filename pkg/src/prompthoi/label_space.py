"""Unifying several HOI datasets into one label space.

Synonyms are collapsed from explicit hints only. Canonical ids are assigned by
sorting canonical terms, so the result does not depend on manifest order.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .boxes import Box
from .records import TripletAnnotation

KINDS = ("objects", "actions")


class SynonymConflict(ValueError):
    pass


@dataclass
class DatasetManifest:
    name: str
    object_vocab: list[str]
    action_vocab: list[str]
    # (image id, triplet with local ids)
    annotations: list[tuple[str, TripletAnnotation]] = field(default_factory=list)
    # kind -> [(local term, canonical term)]
    synonym_hints: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "held_out"):
            raise ValueError(f"{self.name}: split must be 'train' or 'held_out'")
        for kind, vocab in (("objects", self.object_vocab), ("actions", self.action_vocab)):
            if len(set(vocab)) != len(vocab):
                raise ValueError(f"{self.name}: duplicate terms in {kind} vocabulary")
        for img, t in self.annotations:
            if not 0 <= t.object_class < len(self.object_vocab):
                raise ValueError(f"{self.name}/{img}: object id {t.object_class} out of range")
            if not 0 <= t.verb_class < len(self.action_vocab):
                raise ValueError(f"{self.name}/{img}: action id {t.verb_class} out of range")

    def vocab(self, kind: str) -> list[str]:
        return self.object_vocab if kind == "objects" else self.action_vocab

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "objects": list(self.object_vocab),
            "actions": list(self.action_vocab),
            "synonyms": {k: [list(p) for p in self.synonym_hints.get(k, [])] for k in KINDS},
            "annotations": [
                {
                    "image_id": img,
                    "human": list(t.human.corners()),
                    "object": list(t.object.corners()),
                    "object_class": t.object_class,
                    "verb_class": t.verb_class,
                }
                for img, t in self.annotations
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        unknown = set(d) - {"name", "split", "objects", "actions", "synonyms", "annotations"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        anns = [
            (
                str(a["image_id"]),
                TripletAnnotation(
                    Box.from_corners(*a["human"]),
                    Box.from_corners(*a["object"]),
                    int(a["object_class"]),
                    int(a["verb_class"]),
                ),
            )
            for a in d.get("annotations", [])
        ]
        hints = {k: [tuple(p) for p in d.get("synonyms", {}).get(k, [])] for k in KINDS}
        return cls(d["name"], list(d["objects"]), list(d["actions"]), anns, hints, d.get("split", "train"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class UnifiedLabelSpace:
    objects: tuple[str, ...]
    actions: tuple[str, ...]
    hois: tuple[tuple[int, int], ...]  # (action id, object id)
    synonyms: dict[str, dict[str, tuple[str, ...]]] = field(default_factory=dict)
    # kind -> canonical id -> sorted ((dataset, local id), ...)
    provenance: dict[str, dict[int, tuple[tuple[str, int], ...]]] = field(default_factory=dict)

    def __post_init__(self):
        self.objects = tuple(self.objects)
        self.actions = tuple(self.actions)
        self.hois = tuple((int(a), int(o)) for a, o in self.hois)
        if len(set(self.objects)) != len(self.objects) or len(set(self.actions)) != len(self.actions):
            raise ValueError("canonical terms must be unique")
        for a, o in self.hois:
            if not (0 <= a < len(self.actions) and 0 <= o < len(self.objects)):
                raise ValueError(f"hoi ({a}, {o}) references unknown ids")
        if len(set(self.hois)) != len(self.hois):
            raise ValueError("duplicate hoi categories")
        self._hoi_index = {p: i for i, p in enumerate(self.hois)}

    @classmethod
    def from_terms(cls, objects: Sequence[str], actions: Sequence[str], hois: Iterable[tuple[str, str]]):
        """Build a space from term lists and (action term, object term) pairs."""
        oi = {t: i for i, t in enumerate(objects)}
        ai = {t: i for i, t in enumerate(actions)}
        return cls(tuple(objects), tuple(actions), tuple((ai[a], oi[o]) for a, o in hois))

    def hoi_id(self, action_id: int, object_id: int) -> int:
        try:
            return self._hoi_index[(action_id, object_id)]
        except KeyError:
            raise KeyError(f"unknown HOI category (action={action_id}, object={object_id})") from None

    def has_hoi(self, action_id: int, object_id: int) -> bool:
        return (action_id, object_id) in self._hoi_index

    def hoi_terms(self, hoi: int) -> tuple[str, str]:
        a, o = self.hois[hoi]
        return self.actions[a], self.objects[o]

    def to_dict(self) -> dict:
        return {
            "objects": list(self.objects),
            "actions": list(self.actions),
            "hois": [list(p) for p in self.hois],
            "synonyms": {k: {c: list(v) for c, v in sorted(self.synonyms.get(k, {}).items())} for k in KINDS},
            "provenance": {
                k: {str(i): [list(p) for p in v] for i, v in sorted(self.provenance.get(k, {}).items())}
                for k in KINDS
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnifiedLabelSpace":
        return cls(
            tuple(d["objects"]),
            tuple(d["actions"]),
            tuple(tuple(p) for p in d["hois"]),
            {k: {c: tuple(v) for c, v in d.get("synonyms", {}).get(k, {}).items()} for k in KINDS},
            {
                k: {int(i): tuple((ds, int(li)) for ds, li in v) for i, v in d.get("provenance", {}).get(k, {}).items()}
                for k in KINDS
            },
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "UnifiedLabelSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        core = json.dumps([self.objects, self.actions, self.hois])
        return hashlib.sha256(core.encode()).hexdigest()[:16]


@dataclass
class LeakageReport:
    held_out_datasets: tuple[str, ...]
    held_out_hois: tuple[int, ...]
    # held-out categories that also occur in a training manifest
    leaked_hois: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "held_out_datasets": list(self.held_out_datasets),
            "held_out_hois": list(self.held_out_hois),
            "leaked_hois": list(self.leaked_hois),
        }


@dataclass
class MergeResult:
    label_space: UnifiedLabelSpace
    annotations: list[tuple[str, TripletAnnotation]]  # ("dataset/image", canonical triplet)
    leakage: LeakageReport

    def to_manifest(self, name: str = "unified") -> DatasetManifest:
        """Re-express the unified dataset as a single manifest (used for idempotence checks)."""
        return DatasetManifest(name, list(self.label_space.objects), list(self.label_space.actions), list(self.annotations))


def _canonicalize(manifests: Sequence[DatasetManifest], kind: str) -> dict[str, str]:
    """Map every term of ``kind`` to its canonical term."""
    parent: dict[str, str] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def add(x):
        parent.setdefault(x, x)

    hinted: dict[str, str] = {}
    for m in manifests:
        for t in m.vocab(kind):
            add(t)
        for term, canon in m.synonym_hints.get(kind, []):
            if term not in m.vocab(kind):
                raise ValueError(f"{m.name}: synonym hint references unknown {kind[:-1]} '{term}'")
            prev = hinted.get(term)
            if prev is not None and prev != canon:
                raise SynonymConflict(f"{kind[:-1]} '{term}' is hinted to both '{prev}' and '{canon}'")
            hinted[term] = canon
            add(canon)
            ra, rb = find(term), find(canon)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    classes: dict[str, list[str]] = {}
    for t in parent:
        classes.setdefault(find(t), []).append(t)
    mapping = {}
    for members in classes.values():
        named = sorted({hinted[t] for t in members if t in hinted})
        if len(named) > 1:
            raise SynonymConflict(f"{kind[:-1]} synonyms {sorted(members)} name several canonicals: {named}")
        canon = named[0] if named else min(members)
        for t in members:
            mapping[t] = canon
    return mapping


def merge_datasets(manifests: Sequence[DatasetManifest]) -> MergeResult:
    if not manifests:
        raise ValueError("need at least one manifest")
    names = [m.name for m in manifests]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate manifest names: {names}")
    manifests = sorted(manifests, key=lambda m: m.name)

    canon_terms = {}
    ids = {}
    local_to_canon = {}
    provenance = {}
    synonyms = {}
    for kind in KINDS:
        mapping = _canonicalize(manifests, kind)
        # only canonicals that some vocabulary actually maps to
        used = sorted({mapping[t] for m in manifests for t in m.vocab(kind)})
        canon_terms[kind] = used
        ids[kind] = {t: i for i, t in enumerate(used)}
        prov: dict[int, set] = {}
        syn: dict[str, set] = {}
        for m in manifests:
            table = []
            for li, t in enumerate(m.vocab(kind)):
                cid = ids[kind][mapping[t]]
                table.append(cid)
                prov.setdefault(cid, set()).add((m.name, li))
                syn.setdefault(mapping[t], set()).add(t)
            local_to_canon[(m.name, kind)] = table
        provenance[kind] = {i: tuple(sorted(v)) for i, v in prov.items()}
        synonyms[kind] = {c: tuple(sorted(v)) for c, v in syn.items() if v != {c}}

    unified = []
    hoi_sources: dict[tuple[int, int], set[str]] = {}
    for m in manifests:
        omap, amap = local_to_canon[(m.name, "objects")], local_to_canon[(m.name, "actions")]
        for img, t in sorted(m.annotations, key=lambda p: p[0]):
            ct = TripletAnnotation(t.human, t.object, omap[t.object_class], amap[t.verb_class])
            unified.append((f"{m.name}/{img}", ct))
            hoi_sources.setdefault((ct.verb_class, ct.object_class), set()).add(m.split)

    space = UnifiedLabelSpace(
        tuple(canon_terms["objects"]),
        tuple(canon_terms["actions"]),
        tuple(sorted(hoi_sources)),
        synonyms,
        provenance,
    )
    held = tuple(m.name for m in manifests if m.split == "held_out")
    held_hois = tuple(space.hoi_id(*p) for p, s in sorted(hoi_sources.items()) if "held_out" in s)
    leaked = tuple(space.hoi_id(*p) for p, s in sorted(hoi_sources.items()) if {"held_out", "train"} <= s)
    return MergeResult(space, unified, LeakageReport(held, held_hois, leaked))


def unmap_annotation(space: UnifiedLabelSpace, dataset: str, t: TripletAnnotation) -> TripletAnnotation:
    """Map a canonical triplet back to ``dataset``'s local ids through provenance.

    Exact whenever the dataset's vocabulary maps injectively into the unified
    space; if a dataset contributed several synonyms to one canonical term the
    lowest local id is returned.
    """

    def back(kind, cid):
        local = [li for ds, li in space.provenance[kind][cid] if ds == dataset]
        if not local:
            raise KeyError(f"canonical {kind[:-1]} {cid} has no provenance in {dataset}")
        return min(local)

    return TripletAnnotation(t.human, t.object, back("objects", t.object_class), back("actions", t.verb_class))


def write_unified(result: MergeResult, out_dir) -> None:
    from .records import write_records

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.label_space.save(out / "label_space.json")
    per_image: dict[str, list] = {}
    for img, t in result.annotations:
        per_image.setdefault(img, []).append(t)
    write_records(out / "annotations.jsonl", per_image)
    (out / "leakage.json").write_text(json.dumps(result.leakage.to_dict(), indent=1) + "\n")


@dataclass
class RarityStats:
    counts: dict[int, int]
    rare_set: frozenset[int]
    nonrare_set: frozenset[int]
    tail_fraction: float
    threshold: int = 10

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "tail_fraction": self.tail_fraction,
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "rare": sorted(self.rare_set),
            "nonrare": sorted(self.nonrare_set),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RarityStats":
        return cls(
            {int(k): int(v) for k, v in d["counts"].items()},
            frozenset(d["rare"]),
            frozenset(d["nonrare"]),
            float(d["tail_fraction"]),
            int(d.get("threshold", 10)),
        )


def hoi_counts(annotations: Iterable, space: UnifiedLabelSpace) -> Counter:
    """Count instances per HOI id. Accepts triplets or (image id, triplet) pairs."""
    counts: Counter = Counter()
    for item in annotations:
        t = item[1] if isinstance(item, tuple) else item
        counts[space.hoi_id(t.verb_class, t.object_class)] += 1
    return counts


def rarity_split(annotations: Iterable, space: UnifiedLabelSpace, threshold: int = 10) -> RarityStats:
    """Split observed HOI categories into rare (< threshold instances) and non-rare."""
    counts = hoi_counts(annotations, space)
    return rarity_from_counts(counts, threshold)


def rarity_from_counts(counts, threshold: int = 10) -> RarityStats:
    counts = {int(k): int(v) for k, v in dict(counts).items() if v > 0}
    rare = frozenset(k for k, v in counts.items() if v < threshold)
    nonrare = frozenset(counts) - rare
    tail = len(rare) / len(counts) if counts else 0.0
    return RarityStats(counts, rare, nonrare, tail, threshold)

