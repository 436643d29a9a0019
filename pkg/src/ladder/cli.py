"""Command line interface: ``ladder {synth,train,run,eval,render}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command accepts ``--config FILE`` (JSON; a previous run's manifest
works too) whose fields are overridden by explicit flags. The resolved
configuration is written to a manifest next to the outputs.
``LADDER_THREADS`` sets the BLAS thread count (default 1, which keeps
training bit-reproducible).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .evaluation import aggregate, evaluate, write_report_json, write_table_csv
from .geometry import GeometryError, Quad
from .imaging import GrayImage, load_image, save_image
from .loop import (
    LadderConfig,
    LadderError,
    NetPredictor,
    OraclePredictor,
    detections_to_json,
    read_detections,
    run_ladder,
    trace_to_json,
)
from .neural import AdamConfig, CheckpointError, NonFiniteGradient, get_preset, init_params, load_checkpoint, save_checkpoint
from .synth import DEFAULT_RANGES, PRESETS as CHAIN_PRESETS, generate_dataset, read_annotation, split_samples, write_annotation
from .training import AugmentConfig, TrainingDiverged, train, write_history_csv

log = logging.getLogger("ladder")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config / manifest


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    # a manifest carries its resolved config under "config"
    return doc.get("config", doc) if isinstance(doc, dict) else {}


def _resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    cfg.update({k: v for k, v in _load_config(args.config).items() if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, default=_json_default) + "\n")


def _write_manifest(path, command: str, config: dict, inputs: dict, outputs: dict, started: str) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": config.get("seed"),
        "versions": {
            "ladder": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernels": kernels.BACKEND,
        },
        "started": started,
        "finished": _now(),
    }
    _write_json(path, doc)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _threads() -> int:
    raw = os.environ.get("LADDER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LADDER_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------- synth

SYNTH_DEFAULTS = {
    "preset": "lumbar-like",
    "count": 10,
    "seed": 0,
    "fractions": [0.8, 0.1, 0.1],
    "spec": {},
    "ranges": {},
}


def cmd_synth(args) -> int:
    started = _now()
    cfg = _resolve(args, SYNTH_DEFAULTS)
    if args.spec_file:
        extra = _load_config(args.spec_file)
        cfg["spec"] = {**cfg["spec"], **extra.get("spec", extra.get("base", {}))}
        cfg["ranges"] = {**cfg["ranges"], **extra.get("ranges", {})}
    if cfg["preset"] not in CHAIN_PRESETS:
        raise UsageError(f"unknown chain preset {cfg['preset']!r}; choose from {sorted(CHAIN_PRESETS)}")
    if int(cfg["count"]) < 1:
        raise UsageError("count must be >= 1 (refusing to write an empty dataset)")
    try:
        base = replace(CHAIN_PRESETS[cfg["preset"]], **cfg["spec"])
    except TypeError as e:
        raise UsageError(f"bad spec field: {e}") from e
    ranges = {**DEFAULT_RANGES, **{k: tuple(v) for k, v in cfg["ranges"].items()}}
    cfg["ranges"] = {k: list(v) for k, v in ranges.items()}
    try:
        samples = generate_dataset(int(cfg["count"]), base, ranges, int(cfg["seed"]))
    except (GeometryError, ValueError) as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(out / "images" / f"{s.name}.png", s.image, bits=16)
        write_annotation(out / "annotations" / f"{s.name}.json", s.annotation, f"{s.name}.png")
    parts = split_samples(samples, cfg["fractions"], int(cfg["seed"]))
    splits = {k: [s.name for s in p] for k, p in zip(("train", "val", "test"), parts)}
    _write_json(out / "splits.json", splits)
    _write_manifest(out / "manifest.json", "synth", cfg, {}, {"dir": str(out)}, started)
    print(f"wrote {len(samples)} images to {out} (train/val/test {len(parts[0])}/{len(parts[1])}/{len(parts[2])})")
    return EXIT_OK


# ---------------------------------------------------------------- dataset access


class _DiskSample:
    def __init__(self, root: Path, name: str):
        self.name = name
        ann, image_name = read_annotation(root / "annotations" / f"{name}.json")
        self.annotation = ann
        self.image = load_image(root / "images" / (image_name or f"{name}.png"))


def _load_split(root: Path, split: str) -> list:
    try:
        splits = json.loads((root / "splits.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{root}: not a dataset directory ({e})") from e
    if split not in splits:
        raise DataError(f"{root}: no split named {split!r}")
    try:
        return [_DiskSample(root, n) for n in splits[split]]
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"{root}: {e}") from e


# ---------------------------------------------------------------- train

TRAIN_DEFAULTS = {
    "preset": "desk",
    "lr": 1e-4,
    "batch_size": 32,
    "epochs": 100,
    "patience": 20,
    "seed": 0,
    "augment": True,
}


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve(args, TRAIN_DEFAULTS)
    try:
        net_cfg = get_preset(cfg["preset"])
    except KeyError as e:
        raise UsageError(str(e.args[0])) from e
    root = Path(args.dataset)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    train_set = _load_split(root, "train")
    val_set = _load_split(root, "val") or train_set
    if not train_set:
        raise DataError("training split is empty")
    params = init_params(net_cfg, int(cfg["seed"]))
    adam = AdamConfig(lr=float(cfg["lr"]))
    aug = AugmentConfig(seed=int(cfg["seed"])) if cfg["augment"] else None

    def progress(epoch, tr, va):
        log.info("epoch %d  train %.4f  val %.4f", epoch, tr, va)

    res = train(
        net_cfg, params, train_set, val_set, adam,
        batch_size=int(cfg["batch_size"]), max_epochs=int(cfg["epochs"]),
        patience=int(cfg["patience"]), aug=aug, seed=int(cfg["seed"]), progress=progress,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, net_cfg, res.params, adam, {"best_epoch": res.best_epoch, "best_val": res.best_val})
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    write_history_csv(loss_csv, res.history)
    _write_manifest(
        out.with_suffix(".manifest.json"), "train", cfg, {"dataset": str(root)},
        {"checkpoint": str(out), "loss_csv": str(loss_csv)}, started,
    )
    print(f"final validation loss {res.best_val:.6g} (best epoch {res.best_epoch})")
    return EXIT_OK


# ---------------------------------------------------------------- run

RUN_DEFAULTS = {"iterations": 23, "seed_name": "V0", "oracle": False}


def _parse_quad(text: str) -> Quad:
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",")]
        if len(vals) != 8:
            raise ValueError("need 8 numbers")
        return Quad.from_array(vals)
    except (ValueError, GeometryError) as e:
        raise UsageError(f"bad --seed-quad {text!r}: {e}") from e


def _ladder_one(img: GrayImage, seed: Quad, predictor, iters: int, patch: int, seed_name: str, name: str):
    if seed_outside(img, seed):
        raise DataError(f"{name}: seed quad lies outside the image")
    lcfg = LadderConfig(iterations=iters, patch_size=patch)
    try:
        state = run_ladder(img, seed, predictor, lcfg)
        return detections_to_json(state, seed, iters, seed_name, name), state, None
    except LadderError as e:
        st = e.state
        return detections_to_json(st, seed, iters, seed_name, name, str(e)), st, e


def seed_outside(img: GrayImage, q: Quad) -> bool:
    a = q.array()
    return bool(a[:, 0].max() <= 0 or a[:, 1].max() <= 0 or a[:, 0].min() >= img.width or a[:, 1].min() >= img.height)


def cmd_run(args) -> int:
    started = _now()
    cfg = _resolve(args, RUN_DEFAULTS)
    iters = int(cfg["iterations"])
    if iters < 1:
        raise UsageError("--iterations must be >= 1")
    if not cfg["oracle"] and not args.checkpoint:
        raise UsageError("give --checkpoint or --oracle")
    net = None
    if args.checkpoint:
        try:
            net_cfg, params, _, _ = load_checkpoint(args.checkpoint)
        except (OSError, CheckpointError, KeyError) as e:
            raise DataError(f"cannot load checkpoint: {e}") from e
        net = NetPredictor(net_cfg, params)
    patch = net.patch_size if net is not None else int(args.patch_size or 56)

    jobs = []  # (name, image, annotation or None, seed quad)
    if args.dataset:
        for s in _load_split(Path(args.dataset), args.split):
            jobs.append((s.name, s.image, s.annotation, s.annotation.quads[0]))
    else:
        if not args.image:
            raise UsageError("give --image or --dataset")
        try:
            img = load_image(args.image)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read image: {e}") from e
        ann = None
        if args.annotation:
            try:
                ann, _ = read_annotation(args.annotation)
            except (OSError, ValueError, KeyError, GeometryError) as e:
                raise DataError(f"cannot read annotation: {e}") from e
        if args.seed_quad:
            seed = _parse_quad(args.seed_quad)
        elif ann is not None:
            seed = ann.quads[0]
        else:
            raise UsageError("give --seed-quad or --annotation for the seed")
        jobs.append((Path(args.image).stem, img, ann, seed))

    failures = 0
    outputs = {}
    for name, img, ann, seed in jobs:
        if cfg["oracle"]:
            if ann is None:
                raise UsageError("--oracle needs ground truth (--annotation or --dataset)")
            predictor = OraclePredictor(ann)
        else:
            predictor = net
        doc, state, err = _ladder_one(img, seed, predictor, iters, patch, cfg["seed_name"], name)
        failures += err is not None
        if args.dataset:
            out_dir = Path(args.out)
            out_dir.mkdir(parents=True, exist_ok=True)
            dest = out_dir / f"{name}.json"
        else:
            dest = Path(args.out)
            dest.parent.mkdir(parents=True, exist_ok=True)
        _write_json(dest, doc)
        outputs[name] = str(dest)
        if args.trace:
            tdest = Path(args.trace) / f"{name}.trace.json" if args.dataset else Path(args.trace)
            tdest.parent.mkdir(parents=True, exist_ok=True)
            _write_json(tdest, trace_to_json(state))
    man = (Path(args.out) / "manifest.json") if args.dataset else Path(args.out).with_suffix(".manifest.json")
    cfg["checkpoint"] = args.checkpoint
    _write_manifest(man, "run", cfg, {"image": args.image, "dataset": args.dataset}, outputs, started)
    print(f"ran {len(jobs)} ladder(s), {failures} stopped early on errors")
    if failures and not args.dataset:
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    started = _now()
    cfg = _resolve(args, {"spacing": None, "name": "all"})
    det_dir, truth_dir = Path(args.detections), Path(args.truth)
    for d in (det_dir, truth_dir):
        if not d.is_dir():
            raise DataError(f"{d} is not a directory")
    dets = {p.stem: p for p in sorted(det_dir.glob("*.json")) if p.name != "manifest.json"}
    truths = {p.stem: p for p in sorted(truth_dir.glob("*.json")) if p.name != "manifest.json"}
    if args.split_file:
        keep = set(json.loads(Path(args.split_file).read_text())[args.split])
        truths = {k: v for k, v in truths.items() if k in keep}
    missing_truth = sorted(set(dets) - set(truths))
    missing_det = sorted(set(truths) - set(dets))
    if missing_truth or missing_det:
        msg = []
        if missing_truth:
            msg.append("no ground truth for: " + ", ".join(missing_truth))
        if missing_det:
            msg.append("no detections for: " + ", ".join(missing_det))
        raise DataError("; ".join(msg))
    spacing = None if cfg["spacing"] is None else float(cfg["spacing"])
    reports = []
    try:
        for name in sorted(truths):
            ann, _ = read_annotation(truths[name])
            reports.append(evaluate(read_detections(dets[name]), ann.quads, spacing, name))
    except (ValueError, KeyError, GeometryError) as e:
        raise DataError(str(e)) from e
    pooled = aggregate(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = {cfg["name"]: pooled}
    write_table_csv(out.with_suffix(".csv"), rows)
    write_report_json(out.with_suffix(".json"), rows)
    _write_manifest(out.with_suffix(".manifest.json"), "eval", cfg,
                    {"detections": str(det_dir), "truth": str(truth_dir)},
                    {"csv": str(out.with_suffix(".csv")), "json": str(out.with_suffix(".json"))}, started)
    s = pooled.summary()
    print(
        f"recall {s['recall']}  precision {s['precision']}  dice {s['dice_mean']}  "
        f"LE {s['le_mean']} +- {s['le_std']} {s['units']}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- render


def _draw_quad(canvas: np.ndarray, q: Quad, value: float) -> None:
    h, w = canvas.shape
    a = q.array()
    for k in range(4):
        p0, p1 = a[k], a[(k + 1) % 4]
        n = int(math.ceil(2.0 * np.hypot(*(p1 - p0)))) + 1
        t = np.linspace(0.0, 1.0, n)[:, None]
        pts = p0 + t * (p1 - p0)
        xs = np.floor(pts[:, 0]).astype(int)
        ys = np.floor(pts[:, 1]).astype(int)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        canvas[ys[ok], xs[ok]] = value


def render_overlay(img: GrayImage, detections, truth=()) -> GrayImage:
    """Predicted quads in full white, ground truth in mid grey."""
    canvas = img.data.copy()
    for q in truth:
        _draw_quad(canvas, q, 0.5)
    for q in detections:
        _draw_quad(canvas, q, 1.0)
    return GrayImage(canvas)


def cmd_render(args) -> int:
    started = _now()
    try:
        img = load_image(args.image, normalize=False)
        dets = read_detections(args.detections) if args.detections else []
        truth = read_annotation(args.truth)[0].quads if args.truth else []
    except (OSError, ValueError, KeyError, GeometryError) as e:
        raise DataError(str(e)) from e
    from PIL import Image

    with Image.open(args.image) as im:
        bits = 8 if np.asarray(im).dtype == np.uint8 else 16
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, render_overlay(img, dets, truth), bits=bits)
    _write_manifest(out.with_suffix(".manifest.json"), "render", {}, {
        "image": args.image, "detections": args.detections, "truth": args.truth}, {"png": str(out)}, started)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ladder", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic chain dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=sorted(CHAIN_PRESETS))
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--spec-file", help="JSON with 'spec' (fixed fields) and 'ranges' (per-image draws)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the corner-regression network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.json)")
    t.add_argument("--preset")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--loss-csv")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run the ladder on one image or a dataset split")
    r.add_argument("--image")
    r.add_argument("--annotation", help="annotation JSON; instance 0 seeds the ladder")
    r.add_argument("--seed-quad", help="x,y x4 (TL,TR,BR,BL) in image pixels")
    r.add_argument("--dataset", help="dataset directory (runs every image in --split)")
    r.add_argument("--split", default="test")
    r.add_argument("--checkpoint")
    r.add_argument("--oracle", action="store_const", const=True, help="use ground truth as the predictor")
    r.add_argument("--patch-size", type=int, help="patch side for --oracle runs (default 56)")
    r.add_argument("--iterations", type=int)
    r.add_argument("--seed-name")
    r.add_argument("--out", required=True, help="detections JSON (or directory with --dataset)")
    r.add_argument("--trace")
    r.add_argument("--config")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--detections", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--spacing", type=float, help="mm per pixel")
    e.add_argument("--name", help="row label in the CSV")
    e.add_argument("--split-file")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="output prefix; writes .csv and .json")
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", help="draw detections (and truth) over an image")
    d.add_argument("--image", required=True)
    d.add_argument("--detections")
    d.add_argument("--truth")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render, config=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help or a usage error from argparse
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as e:
        print(f"ladder: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"ladder: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteGradient, FloatingPointError) as e:
        print(f"ladder: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
