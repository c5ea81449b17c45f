import json

import numpy as np
import pytest

from prompthoi.boxes import Box
from prompthoi.evaluation import average_precision, evaluate_map
from prompthoi.label_space import UnifiedLabelSpace, rarity_from_counts
from prompthoi.records import ScoredTriplet, TripletAnnotation, read_records, write_records


def brute_force_map(predictions, gts, space, thr=0.5):
    """Independent PR oracle: plain-Python greedy matching, AP from every cutoff."""

    def corners_iou(a, b):
        ax0, ay0, ax1, ay1 = a.corners()
        bx0, by0, bx1, by1 = b.corners()
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = a.w * a.h + b.w * b.h - inter
        return inter / union

    cats = sorted({space.hoi_id(t.verb_class, t.object_class) for anns in gts for t in anns})
    aps = {}
    for c in cats:
        gt_list = [
            (i, k, t)
            for i, anns in enumerate(gts)
            for k, t in enumerate(anns)
            if space.hoi_id(t.verb_class, t.object_class) == c
        ]
        preds = [
            (p.score, i, k, p)
            for i, ps in enumerate(predictions)
            for k, p in enumerate(ps)
            if space.hoi_id(p.verb_class, p.object_class) == c
        ]
        # bubble the ordering out explicitly: score desc, image asc, index asc
        preds.sort(key=lambda r: r[2])
        preds.sort(key=lambda r: r[1])
        preds.sort(key=lambda r: r[0], reverse=True)
        matched = set()
        flags = []
        for _, i, _, p in preds:
            best, best_ov = None, None
            for gi, gk, g in gt_list:
                if gi != i or (gi, gk) in matched:
                    continue
                ih, io = corners_iou(p.human, g.human), corners_iou(p.object, g.object)
                if ih >= thr and io >= thr:
                    ov = min(ih, io)
                    if best_ov is None or ov > best_ov:
                        best, best_ov = (gi, gk), ov
            if best is not None:
                matched.add(best)
            flags.append(best is not None)
        n = len(gt_list)
        prec, rec = [], []
        tp = 0
        for k, f in enumerate(flags, 1):
            tp += f
            prec.append(tp / k)
            rec.append(tp / n)
        ap = 0.0
        prev_r = 0.0
        for k in range(len(flags)):
            if rec[k] > prev_r:
                ap += (rec[k] - prev_r) * max(prec[k:])
                prev_r = rec[k]
        aps[c] = ap
    return sum(aps.values()) / len(aps) if aps else 0.0, aps


def small_space():
    return UnifiedLabelSpace(("cup", "ball", "kite"), ("hold", "kick"), ((0, 0), (0, 1), (1, 1), (0, 2)))


def jitter(rng, b, s):
    x0, y0, x1, y1 = b.corners()
    d = rng.normal(0, s, 4)
    x0, y0 = np.clip([x0 + d[0], y0 + d[1]], 0, 0.9)
    x1, y1 = np.clip([x1 + d[2], y1 + d[3]], [x0 + 0.02, y0 + 0.02], 1.0)
    return Box.from_corners(x0, y0, x1, y1)


def random_box(rng):
    x0, y0 = rng.uniform(0, 0.7, 2)
    w, h = rng.uniform(0.05, 0.3, 2)
    return Box.from_corners(x0, y0, x0 + w, y0 + h)


def random_scene(rng, space, n_images=5):
    gts, preds = [], []
    for _ in range(n_images):
        anns = []
        for _ in range(rng.integers(0, 4)):
            a, o = space.hois[rng.integers(len(space.hois))]
            anns.append(TripletAnnotation(random_box(rng), random_box(rng), o, a))
        ps = []
        for t in anns:
            for _ in range(rng.integers(0, 3)):
                ps.append(
                    ScoredTriplet(
                        jitter(rng, t.human, 0.03),
                        jitter(rng, t.object, 0.03),
                        t.object_class,
                        t.verb_class,
                        float(rng.choice([0.1, 0.5, 0.9, rng.uniform()])),
                    )
                )
        for _ in range(rng.integers(0, 4)):
            a, o = space.hois[rng.integers(len(space.hois))]
            ps.append(ScoredTriplet(random_box(rng), random_box(rng), o, a, float(rng.uniform())))
        gts.append(anns)
        preds.append(ps)
    return preds, gts


def test_perfect_and_empty():
    space = small_space()
    rng = np.random.default_rng(1)
    _, gts = random_scene(rng, space, 6)
    gts[0].append(TripletAnnotation(Box(0.5, 0.5, 0.2, 0.2), Box(0.4, 0.4, 0.2, 0.2), 0, 0))
    perfect = [[ScoredTriplet(t.human, t.object, t.object_class, t.verb_class, 0.7) for t in anns] for anns in gts]
    assert evaluate_map(perfect, gts, space).map_full == 1.0
    assert evaluate_map([[] for _ in gts], gts, space).map_full == 0.0


def test_matches_brute_force_oracle_on_50_scenes():
    space = small_space()
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(50):
        preds, gts = random_scene(rng, space)
        if not any(gts):
            continue
        report = evaluate_map(preds, gts, space)
        oracle_map, oracle_aps = brute_force_map(preds, gts, space)
        assert report.map_full == pytest.approx(oracle_map, abs=1e-9)
        for c, ap in oracle_aps.items():
            assert report.per_category_ap[c] == pytest.approx(ap, abs=1e-9)
        checked += 1
    assert checked >= 40


def test_permutation_invariance_of_image_order():
    space = small_space()
    rng = np.random.default_rng(7)
    preds, gts = random_scene(rng, space, 8)
    base = evaluate_map(preds, gts, space)
    perm = rng.permutation(8)
    # distinct scores make the ordering independent of image index
    other = evaluate_map([preds[i] for i in perm], [gts[i] for i in perm], space)
    if len({p.score for ps in preds for p in ps}) == sum(len(ps) for ps in preds):
        assert other.map_full == pytest.approx(base.map_full, abs=1e-12)


def test_duplicating_predictions_never_increases_ap():
    space = small_space()
    rng = np.random.default_rng(11)
    for _ in range(20):
        preds, gts = random_scene(rng, space)
        if not any(gts):
            continue
        base = evaluate_map(preds, gts, space)
        dup = evaluate_map([[p for p in ps for _ in (0, 1)] for ps in preds], gts, space)
        for c, ap in base.per_category_ap.items():
            assert dup.per_category_ap[c] <= ap + 1e-12


def test_unknown_category_raises():
    space = small_space()
    gt = [[TripletAnnotation(Box(0.5, 0.5, 0.2, 0.2), Box(0.5, 0.5, 0.2, 0.2), 0, 0)]]
    bad = [[ScoredTriplet(Box(0.5, 0.5, 0.2, 0.2), Box(0.5, 0.5, 0.2, 0.2), 7, 0, 1.0)]]
    with pytest.raises(KeyError):
        evaluate_map(bad, gt, space)
    # valid ids but an unobserved (action, object) pair
    bad = [[ScoredTriplet(Box(0.5, 0.5, 0.2, 0.2), Box(0.5, 0.5, 0.2, 0.2), 0, 1, 1.0)]]
    with pytest.raises(KeyError):
        evaluate_map(bad, gt, space)


def test_rare_split_uses_training_counts():
    space = small_space()
    rng = np.random.default_rng(5)
    preds, gts = random_scene(rng, space, 10)
    rarity = rarity_from_counts({0: 3, 1: 50, 2: 10, 3: 9})
    rep = evaluate_map(preds, gts, space, rarity=rarity)
    cats = set(rep.per_category_ap)
    rare = cats & {0, 3}
    nonrare = cats & {1, 2}
    assert rep.n_rare == len(rare) and rep.n_nonrare == len(nonrare)
    if rare:
        assert rep.map_rare == pytest.approx(np.mean([rep.per_category_ap[c] for c in rare]))


def test_average_precision_small_cases():
    assert average_precision(np.array([1, 0, 1]), 2) == pytest.approx(1 * 0.5 + (2 / 3) * 0.5)
    assert average_precision(np.array([]), 3) == 0.0


def test_records_roundtrip(tmp_path):
    per_image = {
        "a": [TripletAnnotation(Box.from_corners(0, 0, 0.5, 0.5), Box.from_corners(0.25, 0.25, 0.75, 1.0), 1, 0)],
        "b": [ScoredTriplet(Box.from_corners(0.125, 0, 0.5, 0.5), Box.from_corners(0, 0, 1, 1), 0, 1, 0.25)],
    }
    path = tmp_path / "r.jsonl"
    write_records(path, per_image)
    first = json.loads(path.read_text().splitlines()[0])
    assert list(first) == ["image_id", "human", "object", "object_class", "verb_class"]
    assert read_records(path) == per_image
    write_records(tmp_path / "r2.jsonl", read_records(path))
    assert (tmp_path / "r2.jsonl").read_bytes() == path.read_bytes()
