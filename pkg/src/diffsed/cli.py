"""Command-line entry point: gen-data, train, infer, eval, sweep.

Every command writes its outputs under a run directory together with a
``run.json`` provenance record (arguments, resolved config, git hash, wall time).
Training options may also come from an INI file (``--config``) whose ``[run]``
section uses RunConfig field names; explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from collections import Counter
from dataclasses import fields
from pathlib import Path

import numpy as np

from .audio import DatasetError, GeneratorSpec, load_dataset, read_annotations, read_meta, save_dataset, synth_dataset
from .engine import RunConfig, evaluate_model, featurize, load_model, predict, save_model, to_detections, train
from .metrics import evaluate, read_predictions, write_predictions

log = logging.getLogger("diffsed")

SWEEP_AXES = ("queries", "steps", "scale", "seed")


class CliError(Exception):
    """User-facing failure; printed without a traceback, exit status 2."""


# ------------------------------------------------------------------ helpers


def git_hash() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_run_record(run_dir: Path, command: str, args: argparse.Namespace, start: float, **extra):
    record = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "git_hash": git_hash(),
        "wall_seconds": time.perf_counter() - start,
        **extra,
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise CliError(f"config file: unknown key {name!r}")
    kind = str(kinds[name])
    if kind.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep field names such as T case-sensitive
    if not parser.read(path):
        raise CliError(f"config file {path} not found")
    if "run" not in parser:
        raise CliError(f"config file {path} has no [run] section")
    return {k: _coerce(k, v) for k, v in parser["run"].items()}


# flag name -> RunConfig field
TRAIN_FLAGS = {
    "mode": "mode", "queries": "n_queries", "scale": "scale", "T": "T", "steps": "infer_steps",
    "epochs": "epochs", "lr": "lr", "lr_decay": "lr_decay", "lr_decay_epoch": "lr_decay_epoch",
    "restore_every": "restore_every", "batch": "batch", "seed": "seed", "infer_seed": "infer_seed",
    "dropout": "dropout", "d_model": "d_model", "grad_clip": "grad_clip", "threshold": "threshold",
    "collar": "collar", "offset_ratio": "offset_ratio", "segment_length": "segment_length",
}


def resolve_config(args) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, name in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    values["train_dir"] = str(args.train) if args.train else values.get("train_dir")
    values["val_dir"] = str(args.val) if getattr(args, "val", None) else values.get("val_dir")
    values["out_dir"] = str(args.out)
    try:
        cfg = RunConfig.from_dict(values)
        cfg.validate()
    except (ValueError, FileNotFoundError) as e:
        raise CliError(str(e)) from None
    if cfg.train_dir is None:
        raise CliError("a training dataset is required (--train or train_dir in the config file)")
    return cfg


def load_features(path, cfg: RunConfig):
    try:
        return featurize(load_dataset(path), cfg)
    except (DatasetError, OSError) as e:
        raise CliError(f"{path}: {e}") from None


def dataset_classes(path) -> int | None:
    meta = read_meta(path)
    return meta.get("spec", {}).get("n_classes") if meta else None


# ----------------------------------------------------------------- commands


def parse_event_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or MIN-MAX, got {text!r}") from None
    return a, b


def cmd_gen_data(args) -> int:
    start = time.perf_counter()
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} is not empty; pass --force to write into it")
    lo, hi = args.events_per_clip
    spec = GeneratorSpec(n_clips=args.clips, duration=args.duration, n_classes=args.classes, events_min=lo,
                         events_max=hi, snr_db=args.snr, allow_overlap=not args.no_overlap, id_prefix=args.prefix)
    try:
        clips = synth_dataset(spec, args.seed)
    except ValueError as e:
        raise CliError(str(e)) from None
    save_dataset(clips, out, {"spec": spec.to_dict(), "seed": args.seed})
    hist = Counter(a.label for c in clips for a in c.annotations)
    summary = {
        "clips": len(clips),
        "events": sum(hist.values()),
        "class_histogram": {str(k): hist.get(k, 0) for k in range(spec.n_classes)},
        "meta_sha256": hashlib.sha256((out / "meta.json").read_bytes()).hexdigest(),
    }
    print(json.dumps(summary, sort_keys=True))
    write_run_record(out, "gen-data", args, start, summary=summary)
    return 0


def cmd_train(args) -> int:
    start = time.perf_counter()
    cfg = resolve_config(args)
    train_set = load_features(cfg.train_dir, cfg)
    val_set = load_features(cfg.val_dir, cfg) if cfg.val_dir else None
    n_classes = dataset_classes(cfg.train_dir)
    out = Path(cfg.out_dir)
    _, rows = train(cfg, train_set, val_set, n_classes, out)
    best = max((r.get("val_event_f1", 0.0) for r in rows), default=0.0)
    print(json.dumps({"epochs": len(rows), "best_val_event_f1": best, "final_train_loss": rows[-1]["train_loss"]}))
    write_run_record(out, "train", args, start, config=cfg.to_dict(), best_val_event_f1=best)
    return 0


def cmd_infer(args) -> int:
    start = time.perf_counter()
    try:
        model, cfg = load_model(args.checkpoint)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load {args.checkpoint}: {e}") from None
    if args.expect_hash and args.expect_hash != model.cfg.arch_hash():
        raise CliError(f"architecture hash {model.cfg.arch_hash()} does not match expected {args.expect_hash}")
    steps = cfg.infer_steps if args.steps is None else args.steps
    if not 1 <= steps <= cfg.T:
        raise CliError(f"steps={steps} outside [1, T={cfg.T}]")
    data = load_features(args.data, cfg)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    props = predict(model, cfg, data.mels, steps, args.seed)
    rows = []
    for cid, pp, dur in zip(data.clip_ids, props, data.durations):
        for d in to_detections(pp, dur, threshold):
            rows.append({"clip_id": cid, "onset": d.onset, "offset": d.offset, "label": d.label, "score": d.score})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, rows)
    print(json.dumps({"clips": len(props), "predictions": len(rows), "steps": steps, "seed": args.seed}))
    write_run_record(out.parent, "infer", args, start, config=cfg.to_dict(), arch_hash=model.cfg.arch_hash())
    return 0


def cmd_eval(args) -> int:
    start = time.perf_counter()
    try:
        records = read_annotations(args.data)
        preds = read_predictions(args.predictions)
    except (DatasetError, ValueError, OSError) as e:
        raise CliError(str(e)) from None
    ids = [r["clip_id"] for r in records]
    unknown = sorted(set(preds) - set(ids))
    if unknown:
        raise CliError(f"predictions reference {len(unknown)} clip(s) absent from the annotations: "
                       + ", ".join(unknown))
    report = evaluate([preds.get(i, []) for i in ids], [r["events"] for r in records],
                      [r["duration"] for r in records], args.collar, args.offset_ratio, args.segment_length,
                      args.threshold)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        write_run_record(Path(args.out).parent, "eval", args, start)
    return 0


def _sweep_values(axis: str, raw: list[str]) -> list:
    try:
        return [float(v) if axis == "scale" else int(v) for v in raw]
    except ValueError:
        raise CliError(f"bad value for axis {axis}: {raw}") from None


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    if args.axis not in SWEEP_AXES:
        # argparse choices already guard the CLI; kept for programmatic callers
        raise CliError(f"unknown axis {args.axis!r}; choose from {SWEEP_AXES}")
    values = _sweep_values(args.axis, args.values)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.axis in ("steps", "seed"):
        if args.checkpoint:
            model, cfg = load_model(args.checkpoint)
        else:
            cfg = resolve_config(args)
            model, _ = train(cfg, load_features(cfg.train_dir, cfg),
                             load_features(cfg.val_dir, cfg) if cfg.val_dir else None,
                             dataset_classes(cfg.train_dir), run_dir / "model")
        val_dir = args.val or cfg.val_dir
        if val_dir is None:
            raise CliError("steps/seed sweeps need a validation dataset (--val)")
        val = load_features(val_dir, cfg)
        for v in values:
            kw = {"steps": v} if args.axis == "steps" else {"seed": v}
            rep = evaluate_model(model, cfg, val, **kw)
            rows.append({"axis": args.axis, "value": v, "event_f1": rep.event_f1,
                         "segment_f1": rep.segment_f1, "tagging_f1": rep.tagging_f1})
    else:
        base = resolve_config(args)
        train_set = load_features(base.train_dir, base)
        val = load_features(base.val_dir, base) if base.val_dir else None
        n_classes = dataset_classes(base.train_dir)
        for v in values:
            cfg = RunConfig.from_dict({**base.to_dict(), ("n_queries" if args.axis == "queries" else "scale"): v})
            _, log_rows = train(cfg, train_set, val, n_classes, run_dir / f"{args.axis}_{v}")
            best = max(log_rows, key=lambda r: r.get("val_event_f1", 0.0))
            rows.append({"axis": args.axis, "value": v, "event_f1": best.get("val_event_f1", 0.0),
                         "segment_f1": best.get("val_segment_f1", 0.0),
                         "tagging_f1": best.get("val_tagging_f1", 0.0)})
    table = run_dir / "sweep.csv"
    with open(table, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["axis", "value", "event_f1", "segment_f1", "tagging_f1"])
        w.writeheader()
        w.writerows(rows)
    f1 = np.array([r["event_f1"] for r in rows])
    stats = {"mean": float(f1.mean()), "std": float(f1.std()), "spread": float(f1.max() - f1.min())}
    print(json.dumps({"table": str(table), "event_f1": stats}))
    write_run_record(run_dir, "sweep", args, start, rows=rows, event_f1_stats=stats)
    return 0


# ------------------------------------------------------------------ parser


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with a [run] section of RunConfig keys")
    p.add_argument("--train", type=Path, help="training dataset directory")
    p.add_argument("--val", type=Path, help="validation dataset directory")
    p.add_argument("--mode", choices=["diffsed", "diffsed-bb", "sedt-baseline"])
    p.add_argument("--queries", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--steps", type=int, help="denoising steps used for validation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--lr-decay-epoch", dest="lr_decay_epoch", type=int)
    p.add_argument("--restore-every", dest="restore_every", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--infer-seed", dest="infer_seed", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--collar", type=float)
    p.add_argument("--offset-ratio", dest="offset_ratio", type=float)
    p.add_argument("--segment-length", dest="segment_length", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffsed", description="Query-denoising sound event detection.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a labeled dataset")
    g.add_argument("out_dir", type=Path)
    g.add_argument("--clips", type=int, default=100)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--events-per-clip", type=parse_event_range, default=(1, 3), metavar="N|MIN-MAX")
    g.add_argument("--snr", type=float, default=20.0, help="event-to-background SNR in dB")
    g.add_argument("--duration", type=float, default=10.0)
    g.add_argument("--no-overlap", action="store_true")
    g.add_argument("--prefix", default="clip", help="clip id prefix")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector")
    _add_train_flags(t)
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write JSON-lines predictions")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True, help="predictions .jsonl")
    i.add_argument("--steps", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--threshold", type=float)
    i.add_argument("--expect-hash", help="abort unless the checkpoint architecture hash equals this")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against annotations")
    e.add_argument("--predictions", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True, help="dataset directory or annotations.jsonl")
    e.add_argument("--out", type=Path, help="report JSON path")
    e.add_argument("--collar", type=float, default=0.2)
    e.add_argument("--offset-ratio", dest="offset_ratio", type=float, default=0.2)
    e.add_argument("--segment-length", dest="segment_length", type=float, default=1.0)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one-axis ablation table")
    _add_train_flags(s)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--checkpoint", type=Path, help="trained model for steps/seed sweeps")
    s.add_argument("--out", type=Path, required=True, help="run directory")
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
