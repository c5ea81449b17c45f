import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prompthoi.boxes import Box
from prompthoi.label_space import (
    DatasetManifest,
    SynonymConflict,
    UnifiedLabelSpace,
    merge_datasets,
    rarity_split,
    unmap_annotation,
    write_unified,
)
from prompthoi.records import TripletAnnotation, read_records

H = Box(0.3, 0.5, 0.2, 0.6)
O = Box(0.6, 0.5, 0.2, 0.2)


def ann(o, a):
    return TripletAnnotation(H, O, o, a)


def toy_pair():
    m1 = DatasetManifest("alpha", ["cup"], ["hold"], [("1", ann(0, 0))])
    m2 = DatasetManifest(
        "beta",
        ["cup", "ball"],
        ["grasp", "throw"],
        [("1", ann(0, 0)), ("2", ann(1, 1)), ("2", ann(0, 0))],
        {"actions": [("grasp", "hold")]},
    )
    return m1, m2


def test_single_manifest_identity():
    m = DatasetManifest("solo", ["ball", "cup"], ["hold", "kick"], [("a", ann(1, 0)), ("b", ann(0, 1))])
    res = merge_datasets([m])
    assert res.label_space.objects == ("ball", "cup")
    assert res.label_space.actions == ("hold", "kick")
    for (img, t), (_, src) in zip(res.annotations, sorted(m.annotations, key=lambda p: p[0])):
        assert img.startswith("solo/")
        assert t == src


def test_two_manifests_with_synonym_collapse():
    res = merge_datasets(list(toy_pair()))
    sp = res.label_space
    assert sp.objects == ("ball", "cup")
    assert sp.actions == ("hold", "throw")
    assert sp.synonyms["actions"] == {"hold": ("grasp", "hold")}
    # hoi pairs observed: (hold, cup), (throw, ball)
    assert set(sp.hois) == {(0, 1), (1, 0)}
    assert sp.provenance["actions"][0] == (("alpha", 0), ("beta", 0))


def test_canonical_is_lexicographic_minimum_without_hint_naming():
    m = DatasetManifest("m", ["mug", "cup"], ["hold"], [], {"objects": [("mug", "mug")]})
    m2 = DatasetManifest("n", ["cup"], ["hold"], [], {"objects": [("cup", "mug")]})
    sp = merge_datasets([m, m2]).label_space
    assert sp.objects == ("mug",)  # hinted canonical wins over "cup"
    m3 = DatasetManifest("k", ["mug", "cup"], ["hold"], [])
    assert merge_datasets([m3]).label_space.objects == ("cup", "mug")


def test_conflicting_hints_raise_with_terms():
    m1 = DatasetManifest("a", ["cup"], ["grasp"], [], {"actions": [("grasp", "hold")]})
    m2 = DatasetManifest("b", ["cup"], ["grasp"], [], {"actions": [("grasp", "take")]})
    with pytest.raises(SynonymConflict, match="grasp"):
        merge_datasets([m1, m2])
    # transitive conflict: two hinted canonicals end up in one class
    m3 = DatasetManifest("c", ["cup"], ["grasp", "hold", "take"], [], {"actions": [("grasp", "hold"), ("take", "grasp")]})
    m4 = DatasetManifest("d", ["cup"], ["take"], [], {"actions": []})
    with pytest.raises(SynonymConflict):
        merge_datasets([m3, DatasetManifest("e", ["cup"], ["hold"], [], {"actions": [("hold", "take")]}), m4])


def test_hint_must_reference_existing_term():
    m = DatasetManifest("a", ["cup"], ["hold"], [], {"actions": [("grab", "hold")]})
    with pytest.raises(ValueError, match="grab"):
        merge_datasets([m])


def test_order_invariance_and_idempotence():
    m1, m2 = toy_pair()
    a = merge_datasets([m1, m2])
    b = merge_datasets([m2, m1])
    assert a.label_space.dumps() == b.label_space.dumps()
    assert a.annotations == b.annotations
    again = merge_datasets([a.to_manifest()])
    assert again.label_space.objects == a.label_space.objects
    assert again.label_space.actions == a.label_space.actions
    assert again.label_space.hois == a.label_space.hois
    assert [t for _, t in again.annotations] == [t for _, t in a.annotations]


def test_provenance_total_and_roundtrip():
    m1, m2 = toy_pair()
    res = merge_datasets([m1, m2])
    sp = res.label_space
    for kind, n in (("objects", len(sp.objects)), ("actions", len(sp.actions))):
        assert set(sp.provenance[kind]) == set(range(n))
    sources = {m.name: sorted(m.annotations, key=lambda p: p[0]) for m in (m1, m2)}
    back = {}
    for img, t in res.annotations:
        ds, local_img = img.split("/", 1)
        back.setdefault(ds, []).append((local_img, unmap_annotation(sp, ds, t)))
    assert back == sources


def test_leakage_audit():
    train = DatasetManifest("train", ["cup", "kite"], ["hold", "fly"], [("1", ann(0, 0)), ("2", ann(1, 1))])
    test = DatasetManifest("zs", ["cup", "ball"], ["hold"], [("1", ann(0, 0)), ("2", ann(1, 0))], split="held_out")
    res = merge_datasets([train, test])
    sp = res.label_space
    hold_cup = sp.hoi_id(sp.actions.index("hold"), sp.objects.index("cup"))
    hold_ball = sp.hoi_id(sp.actions.index("hold"), sp.objects.index("ball"))
    assert res.leakage.held_out_datasets == ("zs",)
    assert set(res.leakage.held_out_hois) == {hold_cup, hold_ball}
    assert res.leakage.leaked_hois == (hold_cup,)


def test_serialization_byte_stable(tmp_path):
    res = merge_datasets(list(toy_pair()))
    write_unified(res, tmp_path / "u")
    text = (tmp_path / "u" / "label_space.json").read_text()
    again = UnifiedLabelSpace.load(tmp_path / "u" / "label_space.json")
    assert again.dumps() == text
    recs = read_records(tmp_path / "u" / "annotations.jsonl")
    assert sum(len(v) for v in recs.values()) == len(res.annotations)
    m1, _ = toy_pair()
    m1.save(tmp_path / "m.json")
    DatasetManifest.load(tmp_path / "m.json").save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


@settings(max_examples=40, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 10_000))
def test_merge_order_invariance_property(perm, seed):
    rng = np.random.default_rng(seed)
    pool_o = ["apple", "bat", "cup", "dog", "egg"]
    pool_a = ["eat", "hit", "hold", "pet", "throw"]
    mans = []
    for k in range(4):
        objs = sorted(rng.choice(pool_o, size=3, replace=False).tolist())
        acts = sorted(rng.choice(pool_a, size=2, replace=False).tolist())
        anns = [(str(i), ann(int(rng.integers(3)), int(rng.integers(2)))) for i in range(3)]
        mans.append(DatasetManifest(f"d{k}", objs, acts, anns))
    a = merge_datasets(mans)
    b = merge_datasets([mans[i] for i in perm])
    assert a.label_space.dumps() == b.label_space.dumps()
    assert a.annotations == b.annotations


def build_table1_manifests():
    """Six toy sources whose overlaps reproduce the unified object/action/HOI counts of the
    large six-way merge (80/1000/80/80/1821/80 objects)."""
    core_o = [f"obj{i:03d}" for i in range(80)]
    core_a = [f"act{i:03d}" for i in range(117)]
    core_hois = [(a, o) for a in range(60) for o in range(10)]  # 600 pairs
    mans = []
    for name in ("hico", "openimages", "pic", "hake"):
        anns = [(f"{k}", ann(o, a)) for k, (a, o) in enumerate(core_hois)]
        mans.append(DatasetManifest(name, core_o, core_a, anns))

    # SWiG-like: 60 core objects, 344 shared with the HCVRD-like set, 596 own
    shared_o = [f"shobj{i:03d}" for i in range(344)]
    shared_a = [f"shact{i:03d}" for i in range(71)]
    s_obj = core_o[:60] + shared_o + [f"swobj{i:03d}" for i in range(596)]
    s_act = core_a[:50] + shared_a + [f"swact{i:03d}" for i in range(286)]
    s_core = [(a, o) for a in range(50) for o in range(10)][:200]
    own_actions = range(50 + 71, 407)
    s_own = list(itertools.islice(((a, o) for a in own_actions for o in range(1000)), 13320))
    s_anns = [(f"{k}", ann(o, a)) for k, (a, o) in enumerate(s_core + s_own)]
    mans.append(DatasetManifest("swig", s_obj, s_act, s_anns))

    # HCVRD-like: shared terms arrive under alias spellings collapsed by hints
    alias_o = [f"hcalias{i:03d}" for i in range(344)]
    h_obj = core_o[:70] + alias_o + [f"hcobj{i:04d}" for i in range(1407)]
    h_act = core_a[:60] + [f"shact{i:03d}" for i in range(71)] + [f"hcact{i:03d}" for i in range(753)]
    h_core = [(a, o) for a in range(50, 60) for o in range(10)] + [(a, o) for a in range(40) for o in range(10)][:95]
    h_own = list(itertools.islice(((a, o) for a in range(60 + 71, 884) for o in range(1821)), 6116))
    h_anns = [(f"{k}", ann(o, a)) for k, (a, o) in enumerate(h_core + h_own)]
    hints = {"objects": [(alias_o[i], shared_o[i]) for i in range(344)]}
    mans.append(DatasetManifest("hcvrd", h_obj, h_act, h_anns, hints))
    return mans


def test_six_way_merge_counting_logic():
    mans = build_table1_manifests()
    assert [len(m.object_vocab) for m in mans] == [80, 80, 80, 80, 1000, 1821]
    sp = merge_datasets(mans).label_space
    assert (len(sp.objects), len(sp.actions), len(sp.hois)) == (2427, 1227, 20036)


def test_rarity_boundary():
    sp = UnifiedLabelSpace(("cup",), ("hold", "kick"), ((0, 0), (1, 0)))
    anns = [ann(0, 0)] * 9 + [ann(0, 1)] * 10
    stats = rarity_split(anns, sp)
    assert stats.rare_set == {0}
    assert stats.nonrare_set == {1}
    assert stats.tail_fraction == 0.5
    assert stats.counts == {0: 9, 1: 10}


def test_zipf_tail_fraction_matches_histogram_oracle():
    n_cat, n_inst = 20_036, 627_335
    rng = np.random.default_rng(0)
    p = 1.0 / np.arange(1, n_cat + 1) ** 1.5
    p /= p.sum()
    draws = rng.choice(n_cat, size=n_inst, p=p)
    hist = np.bincount(draws, minlength=n_cat)
    seen = hist > 0
    oracle = np.count_nonzero(seen & (hist < 10)) / np.count_nonzero(seen)

    sp = UnifiedLabelSpace(("thing",), tuple(f"a{i}" for i in range(n_cat)), tuple((i, 0) for i in range(n_cat)))
    proto = [ann(0, i) for i in range(n_cat)]
    stats = rarity_split((proto[d] for d in draws), sp)
    assert abs(stats.tail_fraction - oracle) <= 0.05
    assert stats.rare_set | stats.nonrare_set == set(np.flatnonzero(seen).tolist())
    assert not stats.rare_set & stats.nonrare_set
