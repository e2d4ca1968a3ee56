"""Command-line pipeline: ``gazelens <subcommand> [flags]``.

Exit codes: 0 on success, 1 on a domain error (message on stderr), 2 on a
usage error. ``--config FILE`` supplies JSON values for any flag (by its
long name, dashes or underscores); flags given on the command line win.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .baselines import ForestConfig, SvmConfig, load_model, save_model, train_forest, train_svm, importance_ranking
from .core import Scanpath
from .errors import GazeLensError, StorageError, UntrainedModel
from .evaluation import SplitConfig, balance_and_split, compute_metrics, read_report, report_rows, write_report, \
    TABLE_COLUMNS
from .features import FEATURE_NAMES, check_finite, extract_features, write_features_csv
from .fixdet import IvtConfig, detect_fixations, read_fixations_csv, write_fixations_csv
from .gradcam import TARGET_MODES, class_heatmaps, overlay, write_heatmap_png, write_region_mass_csv
from .ingest import DatasetManifest, build_manifest, load_manifest, read_gaze_log, read_trial_meta, save_manifest
from .nn import MiniVggSpec, TrainConfig, build_minivgg, load_checkpoint, save_checkpoint, train, write_training_log
from .render import RenderConfig, ScanpathImage, image_to_array, render_scanpath, write_png
from .synth import SynthConfig, export_dataset, generate_dataset

SEED_ENV = "GAZELENS_SEED"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Order-preserving map, optionally over worker processes."""
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    return [fn(x) for x in items]


def _out(args) -> Path:
    p = Path(args.out_dir).resolve()
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(args) -> DatasetManifest:
    return load_manifest(args.manifest)


def _scanpath(rec) -> Scanpath:
    if not rec.fixation_path:
        raise StorageError(f"trial {rec.trial_id} has no fixations; run detect first")
    return Scanpath(tuple(read_fixations_csv(rec.fixation_path)), trial_id=rec.trial_id)


def _render_cfg(args) -> RenderConfig:
    return RenderConfig(args.image_size, args.image_size, antialias=args.antialias)


def _split_if_needed(m: DatasetManifest, seed: int, out: Path) -> DatasetManifest:
    if any(r.split in ("train", "val", "test") for r in m.records):
        return m
    m = balance_and_split(m, SplitConfig(seed=seed))
    save_manifest(m, out / "manifest.jsonl")
    return m


def _split_records(m: DatasetManifest, split: str):
    recs = m.in_split(split)
    return recs, np.array([r.label.y for r in recs], dtype=np.int64)


def _images(recs, cfg: RenderConfig, dtype, jobs: int) -> np.ndarray:
    imgs = _pmap(_render_one, [(_scanpath(r), cfg) for r in recs], jobs)
    if not imgs:
        return np.empty((0, 3, cfg.out_h, cfg.out_w), dtype=dtype)
    return np.stack([image_to_array(ScanpathImage.from_array(a), dtype) for a in imgs])


def _render_one(job):
    sp, cfg = job
    return render_scanpath(sp, cfg).array().copy()


def _detect_one(job):
    rec, ivt = job
    return detect_fixations(read_gaze_log(rec.gaze_path), ivt)


def _features_one(rec):
    return extract_features(_scanpath(rec))


# --------------------------------------------------------------- subcommands

def cmd_synth(args) -> dict:
    cfg = SynthConfig(jitter=args.jitter, dwell=not args.no_dwell, seed=args.seed)
    ds = generate_dataset(args.n_per_class, cfg, args.seed)
    out = _out(args)
    m = export_dataset(ds, out, args.seed, args.format)
    save_manifest(m, out / "manifest.jsonl")
    return {"synth_config": asdict(cfg), "trials": len(m)}


def cmd_ingest(args) -> dict:
    recs = read_trial_meta(args.trials)
    for r in recs:
        read_gaze_log(r.gaze_path)  # fail early on malformed logs
    m = DatasetManifest(tuple(recs))
    save_manifest(m, _out(args) / "manifest.jsonl")
    return {"trials": len(m)}


def cmd_detect(args) -> dict:
    ivt = IvtConfig(args.velocity_threshold, args.min_duration)
    m = _manifest(args)
    out = _out(args)
    fixes = _pmap(_detect_one, [(r, ivt) for r in m.records], args.jobs)
    trials = []
    for r, fx in zip(m.records, fixes):
        path = out / "fixations" / f"{r.trial_id}.csv"
        write_fixations_csv(path, r.trial_id, fx)
        trials.append((replace(r, fixation_path=str(path), fixation_count=None, split=None), fx))
    nm = build_manifest(trials)
    save_manifest(nm, out / "manifest.jsonl")
    return {"ivt": asdict(ivt), "usable": len(nm.usable()), "excluded": len(nm.in_split("excluded"))}


def cmd_render(args) -> dict:
    m = _manifest(args)
    out = _out(args)
    cfg = _render_cfg(args)
    usable = m.usable()
    arrays = _pmap(_render_one, [(_scanpath(r), cfg) for r in usable], args.jobs)
    paths = {}
    for r, a in zip(usable, arrays):
        p = out / "images" / f"{r.trial_id}.png"
        write_png(ScanpathImage.from_array(a), p)
        paths[r.trial_id] = str(p)
    nm = m.replace_records([replace(r, image_path=paths.get(r.trial_id, r.image_path)) for r in m.records])
    save_manifest(nm, out / "manifest.jsonl")
    return {"render_config": asdict(cfg), "images": len(paths)}


def cmd_features(args) -> dict:
    m = _manifest(args)
    usable = m.usable()
    fvs = _pmap(_features_one, usable, args.jobs)
    write_features_csv(_out(args) / "features.csv", [(r.trial_id, r.label.value, f) for r, f in zip(usable, fvs)])
    return {"trials": len(fvs)}


def cmd_train_cnn(args) -> dict:
    out = _out(args)
    m = _split_if_needed(_manifest(args), args.seed, out)
    tcfg = TrainConfig(args.epochs, args.batch_size, args.momentum, args.lr, args.seed, args.precision)
    rcfg = _render_cfg(args)
    dtype = np.float64 if args.precision == "f64" else np.float32
    tr, ytr = _split_records(m, "train")
    va, yva = _split_records(m, "val")
    Xtr = _images(tr, rcfg, dtype, args.jobs)
    Xva = _images(va, rcfg, dtype, args.jobs)
    net = build_minivgg(MiniVggSpec(args.image_size, args.image_size), args.precision, args.seed)

    def progress(e):
        print(f"epoch {e.epoch}: loss {e.train_loss:.4f} acc {e.train_acc:.4f}"
              + ("" if e.val_acc is None else f" val_acc {e.val_acc:.4f}"), file=sys.stderr)

    _, log = train(net, (Xtr, ytr), tcfg, val=(Xva, yva) if len(yva) else None, on_epoch=progress)
    save_checkpoint(net, out / "cnn.ckpt")
    write_training_log(out / "training_log.csv", log)
    return {"train_config": asdict(tcfg), "render_config": asdict(rcfg)}


def _feature_split(m: DatasetManifest, split: str, jobs: int):
    recs, y = _split_records(m, split)
    fvs = _pmap(_features_one, recs, jobs)
    X = np.vstack([f.as_array() for f in fvs]) if fvs else np.empty((0, len(FEATURE_NAMES)))
    check_finite(X, f"{split} features")
    return X, y


def cmd_train_baseline(args) -> dict:
    out = _out(args)
    m = _split_if_needed(_manifest(args), args.seed, out)
    X, y = _feature_split(m, "train", args.jobs)
    if args.kind == "forest":
        cfg = ForestConfig(n_trees=args.n_trees, max_features=args.max_features, seed=args.seed, n_jobs=args.jobs)
        model = train_forest(X, y, cfg)
        with open(out / "feature_importance.csv", "w", encoding="utf-8") as fh:
            fh.write("feature,importance\n")
            for name, v in importance_ranking(model, FEATURE_NAMES):
                fh.write(f"{name},{v!r}\n")
    else:
        cfg = SvmConfig(lam=args.svm_lambda, epochs=args.svm_epochs, seed=args.seed)
        model = train_svm(X, y, cfg)
    save_model(model, out / f"{args.kind}.json")
    return {"kind": args.kind, "config": asdict(cfg)}


def cmd_evaluate(args) -> dict:
    m = _manifest(args)
    out = _out(args)
    if not (args.cnn or args.forest or args.svm):
        raise UsageError("evaluate needs at least one of --cnn, --forest, --svm")
    splits = [s for s in ("train", "val", "test") if m.in_split(s)]
    if not splits:
        raise StorageError("manifest has no split assignments; train a model first")
    report = {"seed": args.seed, "methods": {}, "split_counts": {}}
    for s in splits:
        _, y = _split_records(m, s)
        report["split_counts"][s] = {"relevant": int(y.sum()), "irrelevant": int(len(y) - y.sum())}
    if args.cnn:
        net = load_checkpoint(args.cnn)
        if not net.trained:
            raise UntrainedModel("checkpoint holds an untrained model")
        rcfg = RenderConfig(net.spec.width, net.spec.height, antialias=args.antialias)
        report["methods"]["cnn"] = {}
        for s in splits:
            recs, y = _split_records(m, s)
            p = net.predict_proba(_images(recs, rcfg, net.dtype.type, args.jobs))
            report["methods"]["cnn"][s] = compute_metrics(p, y).to_dict()
    for kind, path in (("forest", args.forest), ("svm", args.svm)):
        if not path:
            continue
        model = load_model(path)
        report["methods"][kind] = {}
        for s in splits:
            X, y = _feature_split(m, s, args.jobs)
            if kind == "forest":
                res = compute_metrics(model.vote_share(X), y)
            else:
                res = compute_metrics(model.margin(X), y, threshold=0.0)
            report["methods"][kind][s] = res.to_dict()
    write_report(report, out / "report.json", out / "report.csv")
    return {"methods": sorted(report["methods"])}


def cmd_gradcam(args) -> dict:
    m = _manifest(args)
    out = _out(args)
    net = load_checkpoint(args.model)
    rcfg = RenderConfig(net.spec.width, net.spec.height, antialias=args.antialias)
    recs, y = _split_records(m, args.split)
    if not recs:
        raise StorageError(f"split {args.split!r} is empty")
    X = _images(recs, rcfg, net.dtype.type, args.jobs)
    maps, averages = class_heatmaps(net, X, [int(v) for v in y], args.target, args.block,
                                    [r.trial_id for r in recs])
    entries = []
    for r, hm, x in zip(recs, maps, X):
        write_heatmap_png(hm, out / "heatmaps" / f"{r.trial_id}.png")
        img = ScanpathImage.from_array(np.floor(x.transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8))
        write_png(overlay(img, hm, args.alpha), out / "overlays" / f"{r.trial_id}.png")
        entries.append((r.trial_id, hm))
    for label, avg in averages.items():
        write_heatmap_png(avg, out / f"average_{label.value}.png")
        entries.append((avg.trial_id, avg))
    write_region_mass_csv(out / "region_mass.csv", entries)
    return {"split": args.split, "maps": len(maps)}


def cmd_report(args) -> dict:
    report = read_report(args.input)
    rows = report_rows(report)
    widths = [max(len(str(c)), *(len(str(r[i])) for r in rows)) if rows else len(str(c))
              for i, c in enumerate(TABLE_COLUMNS)]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(TABLE_COLUMNS, widths)),
             "-|-".join("-" * w for w in widths)]
    lines += [" | ".join(str(v).ljust(w) for v, w in zip(r, widths)) for r in rows]
    text = "\n".join(lines) + "\n"
    (_out(args) / "table.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return {"rows": len(rows)}


# ------------------------------------------------------------------- parser

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _seed_default() -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


COMMANDS = {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazelens", description="Eye-movement relevance prediction pipeline.")
    parser.add_argument("--version", action="version", version=f"gazelens {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    def add(name, fn, help_, manifest=True, jobs=False, image=False):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--out-dir", help="directory for all outputs (required)")
        p.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV} or 0)")
        p.add_argument("--config", help="JSON file of flag values; command-line flags win")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest (required)")
        if jobs:
            p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
        if image:
            p.add_argument("--image-size", type=_positive_int, default=96, help="square image side in px")
            p.add_argument("--antialias", action="store_true", help="4x supersampled rendering")
        p.set_defaults(func=fn, needs_manifest=manifest)
        COMMANDS[name] = p
        return p

    p = add("synth", cmd_synth, "generate a labelled synthetic dataset", manifest=False)
    p.add_argument("--n-per-class", type=_positive_int, default=806)
    p.add_argument("--jitter", type=float, default=SynthConfig.jitter, help="fixation position jitter sigma, px")
    p.add_argument("--no-dwell", action="store_true", help="omit the terminal lower-right dwell")
    p.add_argument("--format", choices=("gaze", "fixations"), default="gaze",
                   help="emit 250 Hz gaze logs or fixation sequences")

    p = add("ingest", cmd_ingest, "build a manifest from a trial metadata CSV", manifest=False)
    p.add_argument("--trials", help="trial metadata CSV (required)")

    p = add("detect", cmd_detect, "detect fixations with I-VT", jobs=True)
    p.add_argument("--velocity-threshold", type=float, default=1000.0, help="px/s")
    p.add_argument("--min-duration", type=float, default=110.0, help="ms")

    add("render", cmd_render, "render scanpath images", jobs=True, image=True)
    add("features", cmd_features, "extract the 20 eye-movement features", jobs=True)

    p = add("train-cnn", cmd_train_cnn, "train the MiniVgg classifier", jobs=True, image=True)
    p.add_argument("--epochs", type=_positive_int, default=6)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")

    p = add("train-baseline", cmd_train_baseline, "train a feature-based baseline", jobs=True)
    p.add_argument("--kind", choices=("forest", "svm"), default="forest")
    p.add_argument("--n-trees", type=_positive_int, default=200)
    p.add_argument("--max-features", type=_positive_int, default=4)
    p.add_argument("--svm-lambda", type=float, default=1e-3)
    p.add_argument("--svm-epochs", type=_positive_int, default=100)

    p = add("evaluate", cmd_evaluate, "score trained models on every split", jobs=True)
    p.add_argument("--cnn", help="CNN checkpoint")
    p.add_argument("--forest", help="forest model JSON")
    p.add_argument("--svm", help="SVM model JSON")
    p.add_argument("--antialias", action="store_true")

    p = add("gradcam", cmd_gradcam, "Grad-CAM heatmaps and class averages", jobs=True)
    p.add_argument("--model", help="CNN checkpoint (required)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--block", type=int, default=-1, help="conv block index (default: last)")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay blend weight")
    p.add_argument("--target", choices=TARGET_MODES, default="output",
                   help="explain every image through the relevance output, or each through its own label")
    p.add_argument("--antialias", action="store_true")

    p = add("report", cmd_report, "print an evaluation report as a table", manifest=False)
    p.add_argument("--input", help="report.json from evaluate (required)")
    return parser


REQUIRED = {"ingest": ("trials",), "gradcam": ("model",), "report": ("input",)}


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, args):
    """Re-parse with the config file's values as defaults, so explicit flags still win."""
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as e:
        raise StorageError(f"cannot read config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    known = {a.dest for a in sub._actions}
    values = {}
    for k, v in doc.items():
        dest = k.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"unknown config key {k!r}")
        values[dest] = v
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    sub = COMMANDS[args.command]
    try:
        if args.config:
            args = _apply_config(parser, sub, argv, args)
        if args.seed is None:
            args.seed = _seed_default()
        missing = [f for f in ("out_dir",) + (("manifest",) if args.needs_manifest else ())
                   + REQUIRED.get(args.command, ()) if getattr(args, f, None) in (None, "")]
        if missing:
            raise UsageError("missing required flag(s): " + ", ".join("--" + f.replace("_", "-") for f in missing))
        extra = args.func(args)
        effective = {k: v for k, v in vars(args).items() if k not in ("func", "needs_manifest")}
        run = {"command": args.command, "version": __version__, "args": effective, **(extra or {})}
        (Path(args.out_dir) / "run_config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n",
                                                            encoding="utf-8")
        return 0
    except UsageError as e:
        sub.print_usage(sys.stderr)
        print(f"gazelens {args.command}: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # argparse re-parse after config
        return int(e.code or 0)
    except (GazeLensError, ValueError) as e:
        print(f"gazelens {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
