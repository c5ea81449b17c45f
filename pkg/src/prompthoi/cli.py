"""Command-line surface: merge, synth, train, eval, predict, ablate, plot.

Every command reads a YAML/JSON config (``--config``) plus ``--set key=value``
overrides. Relative paths resolve against ``--workspace`` (or the
``PROMPTHOI_WORKSPACE`` environment variable, default: current directory).
Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from pydantic import ValidationError

from . import config as cfgmod
from .data import HOIDataset, load_dataset, load_png, write_dataset
from .label_space import DatasetManifest, RarityStats, SynonymConflict, merge_datasets, write_unified

log = logging.getLogger("prompthoi")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InvalidInput(ValueError):
    """Raised for problems the operator can fix in the inputs or configuration."""


class Workspace:
    def __init__(self, root):
        self.root = Path(root).resolve()

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def existing(self, p: str) -> Path:
        q = self.path(p)
        if not q.exists():
            raise InvalidInput(f"input not found: {q}")
        return q


def _lock(out: Path) -> FileLock:
    out.parent.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out) + ".lock", timeout=0)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_checksums(root) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- data


def _load_data(spec, ws: Workspace, label_space=None) -> HOIDataset:
    from .synth.pipeline import generate_corpus, toy_label_space, zipf_weights

    if spec.path is not None:
        ds = load_dataset(ws.existing(spec.path))
    elif spec.generate is not None:
        g = spec.generate
        space = label_space or toy_label_space()
        weights = None if g.zipf_exponent is None else zipf_weights(len(space.hois), g.zipf_exponent, g.zipf_seed)
        ds = generate_corpus(g.n, space, g.seed, weights)
    else:
        raise InvalidInput("data section needs either 'path' or 'generate'")
    for extra in getattr(spec, "extra_paths", []):
        other = load_dataset(ws.existing(extra))
        if other.label_space.fingerprint() != ds.label_space.fingerprint():
            raise InvalidInput(f"{extra}: label space differs from the primary dataset")
        ds = ds + other
    return ds


# ---------------------------------------------------------------- merge


def cmd_merge(c: cfgmod.MergeConfig, ws: Workspace) -> dict:
    manifests = [DatasetManifest.load(ws.existing(p)) for p in c.manifests]
    try:
        result = merge_datasets(manifests)
    except SynonymConflict as err:
        raise InvalidInput(f"synonym conflict: {err}") from err
    out = ws.path(c.out)
    with _lock(out):
        write_unified(result, out)
    return {"label_space": result.label_space.fingerprint(), "hois": len(result.label_space.hois),
            "annotations": len(result.annotations)}


# ---------------------------------------------------------------- synth


def cmd_synth(c: cfgmod.SynthRunConfig, ws: Workspace) -> dict:
    from .label_space import rarity_split
    from .pretrain import consistency_scorer, pretrain_dual_encoder
    from .synth.pipeline import SynthConfig, filter_samples, generate_dataset, toy_label_space
    from .data import Sample

    base = None
    if c.base_data is not None or c.base_generate is not None:
        base = _load_data(cfgmod.DataSpec(path=c.base_data, generate=c.base_generate), ws)
        space = base.label_space
        stats = base.rarity()
    elif c.stats is not None:
        space = toy_label_space()
        stats = RarityStats.from_dict(json.loads(ws.existing(c.stats).read_text()))
    else:
        space = toy_label_space()
        stats = RarityStats({}, frozenset(), frozenset(), 0.0, 10)
    synth_cfg = SynthConfig(canvas=c.canvas, second_pair_prob=c.second_pair_prob, multi_verb_prob=c.multi_verb_prob)
    samples = generate_dataset(c.n, stats, space, c.seed, synth_cfg, observed_only=c.observed_only)

    if c.scorer == "none":
        score_fn = lambda s: 1.0  # noqa: E731
    elif c.scorer_checkpoint is not None:
        from .checkpoint import load_checkpoint

        score_fn = consistency_scorer(load_checkpoint(ws.existing(c.scorer_checkpoint)).model.provider)
    else:
        if base is None:
            raise InvalidInput("the toy_dual scorer needs base_data/base_generate to pre-train on, or scorer_checkpoint")
        score_fn = consistency_scorer(pretrain_dual_encoder(base, steps=c.scorer_pretrain_steps, seed=c.seed))
    filtered = filter_samples(samples, score_fn, c.threshold)
    for s, sc in zip(samples, filtered.scores):
        s.quality_score = round(sc, 6)
    kept = [s.to_sample() for s in filtered.kept]
    if not kept:
        log.warning("synth: no sample passed the quality threshold %.3f; writing an empty dataset", c.threshold)

    before = stats
    pool = [t for s in (base.samples if base else []) for t in s.annotations]
    after = rarity_split(pool + [t for s in kept for t in s.annotations], space, stats.threshold)
    manifest = {
        "seed": c.seed,
        "n_requested": c.n,
        "n_kept": len(kept),
        "threshold": c.threshold,
        "mean_kept_score": filtered.mean_kept_score,
        "synth_config": synth_cfg.to_dict(),
        "observed_only": c.observed_only,
        "label_space_fingerprint": space.fingerprint(),
        "tail_fraction_before": before.tail_fraction,
        "tail_fraction_after": after.tail_fraction,
    }
    out = ws.path(c.out)
    with _lock(out):
        write_dataset(out, HOIDataset(space, kept), {
            "manifest.json": json.dumps(manifest, indent=1, sort_keys=True) + "\n",
            "rarity_stats.json": json.dumps(after.to_dict(), sort_keys=True) + "\n",
        })
    return manifest


# ---------------------------------------------------------------- train / eval


def _train_run(c: cfgmod.TrainRunConfig, ws: Workspace, out: Path):
    from .checkpoint import save_checkpoint
    from .training import train

    train_set = _load_data(c.train_data, ws)
    eval_set = _load_data(c.eval_data, ws, train_set.label_space) if c.eval_data else None
    out.mkdir(parents=True, exist_ok=True)
    res = train(train_set, eval_set, c.model, c.train, c.embedder, c.loss,
                metrics_path=out / "metrics.jsonl", diagnostic_path=out / "diagnostic.json")
    save_checkpoint(out / "checkpoint.safetensors", res.model, res.object_bank, res.interaction_bank,
                    train_set.label_space, {"rarity": res.rarity.to_dict(), "config": c.model_dump(mode="json")})
    report = res.report.to_dict() if res.report else None
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return res, report


def cmd_train(c: cfgmod.TrainRunConfig, ws: Workspace) -> dict:
    out = ws.path(c.out)
    with _lock(out):
        _, report = _train_run(c, ws, out)
    return {"checkpoint": str(out / "checkpoint.safetensors"), "report": report}


def cmd_eval(c: cfgmod.EvalRunConfig, ws: Workspace) -> dict:
    from .checkpoint import load_checkpoint
    from .training import evaluate_model

    ck = load_checkpoint(ws.existing(c.checkpoint))
    data = _load_data(c.data, ws, ck.label_space)
    if data.label_space.fingerprint() != ck.label_space.fingerprint():
        raise InvalidInput("evaluation data uses a different label space than the checkpoint")
    if c.rarity_from:
        rarity = RarityStats.from_dict(json.loads(ws.existing(c.rarity_from).read_text()))
    else:
        rarity = RarityStats.from_dict(ck.extra["rarity"]) if "rarity" in ck.extra else None
    report = evaluate_model(ck.model, data, ck.object_bank, ck.interaction_bank, rarity, c.top_k)
    out = ws.path(c.out)
    with _lock(out):
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return {k: v for k, v in report.to_dict().items() if k != "per_category_ap"}


# ---------------------------------------------------------------- predict


def _prediction_banks(c: cfgmod.PredictRunConfig, ck, ws: Workspace):
    from .prompts import PromptBank, VisualPromptSpec, encode_textual_prompts, encode_visual_prompts

    space, provider = ck.label_space, ck.model.provider
    p = c.prompts
    if p.exemplars:
        spec_path = ws.existing(p.exemplars)
        d = json.loads(spec_path.read_text())
        image = load_png(ws.existing(d["image"]) if not Path(d["image"]).is_absolute() else Path(d["image"]))
        try:
            spec = VisualPromptSpec.from_dict(d, image)
            ob, ib = encode_visual_prompts(spec, provider)
        except (ValueError, KeyError, TypeError) as err:
            raise InvalidInput(f"exemplar spec: {err}") from err
        if ob is None or ib is None:
            raise InvalidInput("exemplar spec needs at least one object box and one pair box")
        return ob, ib
    try:
        obj_ids = ([space.objects.index(o) for o in p.objects] if p.objects is not None
                   else list(range(len(space.objects))))
        if p.interactions is not None:
            hoi_ids = [space.hoi_id(space.actions.index(v), space.objects.index(o)) for v, o in p.interactions]
        else:
            hoi_ids = [h for h, (_, o) in enumerate(space.hois) if o in obj_ids]
    except (ValueError, KeyError) as err:
        raise InvalidInput(f"prompt names an unknown category: {err}") from err
    if not obj_ids or not hoi_ids:
        raise InvalidInput("prompt banks would be empty")
    ob = encode_textual_prompts(obj_ids, space, provider, "object")
    ib = encode_textual_prompts(hoi_ids, space, provider, "interaction", p.person)
    return ob, ib


def cmd_predict(c: cfgmod.PredictRunConfig, ws: Workspace) -> dict:
    import torch

    from .checkpoint import load_checkpoint
    from .data import images_to_tensor, save_png
    from .detector import decode_triplets
    from .overlay import render_overlay
    from .records import dumps_records

    ck = load_checkpoint(ws.existing(c.checkpoint))
    ob, ib = _prediction_banks(c, ck, ws)
    items = []
    if c.data:
        ds = load_dataset(ws.existing(c.data))
        items = [(s.image_id, s.image) for s in ds.samples]
    items += [(Path(p).stem, load_png(ws.existing(p))) for p in c.images]
    if not items:
        raise InvalidInput("no input images (set 'images' or 'data')")
    out = ws.path(c.out)
    with _lock(out):
        (out / "overlays").mkdir(parents=True, exist_ok=True)
        per_image = {}
        with torch.no_grad():
            for image_id, image in items:
                res = ck.model(images_to_tensor([image]), ob.embeddings, ib.embeddings)
                dets = decode_triplets(res, ob.category_ids, ib.category_ids, ck.label_space, c.top_k)[0]
                per_image[image_id] = dets
                overlay = render_overlay(image, dets[: c.overlay_top], ck.label_space, c.overlay_scale)
                save_png(out / "overlays" / f"{image_id}.png", overlay)
        (out / "detections.jsonl").write_text(dumps_records(per_image))
        (out / "banks.json").write_text(json.dumps({"object": ob.to_dict(), "interaction": ib.to_dict()}) + "\n")
    return {"images": len(items), "detections": sum(len(v) for v in per_image.values())}


# ---------------------------------------------------------------- ablate


def ablation_variant(base: cfgmod.TrainRunConfig, toggle: str | None, seed: int) -> cfgmod.TrainRunConfig:
    if toggle is not None and toggle not in cfgmod.ABLATION_TOGGLES:
        raise InvalidInput(f"unknown ablation toggle '{toggle}'; choose from {', '.join(cfgmod.ABLATION_TOGGLES)}")
    model = base.model.model_dump()
    loss = base.loss.model_dump()
    train = base.train.model_dump()
    train["seed"] = seed
    data = base.train_data.model_dump()
    if toggle == "fsd_off":
        model["use_conditioned_features"] = False
    elif toggle == "fclip_off":
        model["use_scene_embedding"] = False
    elif toggle in ("t100", "t500"):
        model["timestep"] = int(toggle[1:])
    elif toggle == "alpha_off":
        model["use_alpha"] = False
    elif toggle == "beta_off":
        model["use_beta"] = False
    elif toggle == "lco_off":
        loss["object"] = 0.0
    elif toggle == "lci_off":
        loss["interaction"] = 0.0
    elif toggle == "text_only":
        train["visual_prob"] = 0.0
    elif toggle in ("data_half", "data_quarter"):
        if data.get("generate") is None:
            raise InvalidInput("data-scale toggles need a generated training set")
        frac = 2 if toggle == "data_half" else 4
        data["generate"]["n"] = max(1, data["generate"]["n"] // frac)
    return base.model_copy(update={
        "model": cfgmod.ModelConfig(**model),
        "loss": cfgmod.LossWeights(**loss),
        "train": cfgmod.TrainSettings(**train),
        "train_data": cfgmod.DataSpec(**data),
    })


def cmd_ablate(c: cfgmod.AblateRunConfig, ws: Workspace) -> dict:
    rows_spec = [None] + list(c.toggles)
    variants = [(t, s, ablation_variant(c.base, t, s)) for t in rows_spec for s in c.seeds]  # validates first
    out = ws.path(c.out)
    rows = []
    with _lock(out):
        out.mkdir(parents=True, exist_ok=True)
        for toggle, seed, variant in variants:
            name = toggle or "base"
            _, report = _train_run(variant, ws, out / f"{name}_seed{seed}")
            rows.append({"toggle": name, "seed": seed,
                         **{k: (report or {}).get(k) for k in ("map_full", "map_rare", "map_nonrare")}})
        (out / "table.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        (out / "table.txt").write_text(format_table(rows))
    return {"rows": rows}


def format_table(rows) -> str:
    lines = [f"{'setting':<14}{'seed':>6}{'Full':>10}{'Rare':>10}{'Non-Rare':>10}"]
    for r in rows:
        cells = [f"{100 * r[k]:10.2f}" if r[k] is not None else f"{'-':>10}" for k in ("map_full", "map_rare", "map_nonrare")]
        lines.append(f"{r['toggle']:<14}{r['seed']:>6}" + "".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- plot


def cmd_plot(c: cfgmod.PlotRunConfig, ws: Workspace) -> dict:
    from .figures import loss_curves, sorted_count_histogram

    src = ws.existing(c.input)
    kind = c.kind
    if kind == "auto":
        kind = "loss" if src.suffix == ".jsonl" else "histogram"
    out = ws.path(c.out)
    with _lock(out):
        if kind == "loss":
            records = [json.loads(line) for line in src.read_text().splitlines() if line.strip()]
            if not any(r.get("kind") == "step" for r in records):
                raise InvalidInput(f"{src}: metrics log has no step records")
            loss_curves(records, out)
        else:
            if src.is_dir():
                counts = load_dataset(src).rarity().counts
            else:
                counts = RarityStats.from_dict(json.loads(src.read_text())).counts
            if not counts:
                raise InvalidInput(f"{src}: no category counts to plot")
            sorted_count_histogram(counts, out)
    return {"figure": str(out), "sha256": sha256_file(out)}


COMMANDS = {
    "merge": cmd_merge,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prompthoi", description=__doc__.splitlines()[0])
    parser.add_argument("--workspace", default=os.environ.get("PROMPTHOI_WORKSPACE", "."),
                        help="root for relative paths (env PROMPTHOI_WORKSPACE)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} (see README for the config schema)")
        p.add_argument("--config", "-c", help="YAML or JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set train.epochs=5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    ws = Workspace(args.workspace)
    try:
        cfg_path = str(ws.existing(args.config)) if args.config else None
        conf = cfgmod.load_config(args.command, cfg_path, args.overrides)
        result = COMMANDS[args.command](conf, ws)
    except ValidationError as err:
        print(f"error: invalid configuration:\n{err}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidInput, ValueError, KeyError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Timeout as err:
        print(f"error: output is locked by another run ({err})", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # runtime failures (divergence, I/O, ...)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
