"""Command-line entry point: synth, train, eval, compare, verify.

Every command is reproducible: all randomness hangs off --seed, artifacts
are byte-identical across reruns with identical arguments (wall-clock data
lives only in the run manifest and the training log's seconds column), and
each training/evaluation output directory carries exactly one
``manifest.json`` recording the resolved configuration, the dataset
fingerprint, and the command line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .errors import CheckpointError, PairingError, TrainingDivergedError
from .data import (dataset_fingerprint, load_dataset_dir, split, synth_generate,
                   write_dataset, METADATA_NAME)
from .layers import fit_vocab
from .models import ArchConfig, build_multimodal, build_unimodal, param_count
from .stats import PredictionSet, compare, evaluate, paired_t_test, report, scatter_emit
from .training import (TrainConfig, load_training_checkpoint, save_training_checkpoint,
                       train)
from .verify import run_suite

OUT_ROOT_ENV = "KCALNET_OUT_ROOT"
DEFAULT_MIN_KCAL = 1.0
DEFAULT_MAX_KCAL = 3000.0


def _default_out(command: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return os.path.join(root, command)


def _prepare_out(path: str, force: bool) -> str:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise SystemExit(f"error: output directory {path} exists and is not empty "
                         f"(pass --force to overwrite)")
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out_dir: str, payload: dict) -> None:
    payload = dict(payload)
    payload["created_unix"] = time.time()
    payload["argv"] = sys.argv
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# -- configuration file ------------------------------------------------------

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "arch"}
_ARCH_KEYS = {f.name: f.type for f in fields(ArchConfig)}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in ("backbone_widths", "backbone_blocks", "backbone_strides", "dense_units"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if key in ("augment",):
        return raw.lower() in ("1", "true", "yes", "on")
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def read_config_file(path: str) -> dict:
    """Parse a ``key = value`` config file; unknown keys are an error."""
    out: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _TRAIN_KEYS and key not in _ARCH_KEYS:
                raise SystemExit(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, raw)
    return out


def resolve_train_config(config_path: str | None, overrides: dict) -> TrainConfig:
    """Precedence: command-line flags > config file > defaults."""
    merged: dict = {}
    if config_path:
        merged.update(read_config_file(config_path))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    arch_kwargs = {k: v for k, v in merged.items() if k in _ARCH_KEYS}
    train_kwargs = {k: v for k, v in merged.items() if k in _TRAIN_KEYS}
    return TrainConfig(arch=ArchConfig(**arch_kwargs), **train_kwargs)


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _prepare_out(args.out or _default_out("synth"), args.force)
    records, truth = synth_generate(args.n, args.seed, args.text_signal,
                                    image_size=args.image_size)
    write_dataset(out, records, truth, force=True)
    _write_manifest(out, {
        "command": "synth",
        "n": args.n, "seed": args.seed, "text_signal": args.text_signal,
        "image_size": args.image_size,
        "dataset_fingerprint": dataset_fingerprint(os.path.join(out, METADATA_NAME)),
        "artifacts": {"metadata": METADATA_NAME, "images": "images/",
                      "truth": "truth.json"},
    })
    print(f"wrote {len(records)} synthetic dishes to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.learning_rate, "image_size": args.image_size,
        "augment": (False if args.no_augment else None),
    }
    cfg = resolve_train_config(args.config, overrides)
    out = _prepare_out(args.out or _default_out("train"), args.force)

    records, load_report = load_dataset_dir(args.data, DEFAULT_MIN_KCAL, DEFAULT_MAX_KCAL)
    ds = split(records, cfg.split_ratio, cfg.seed)
    fingerprint = dataset_fingerprint(os.path.join(args.data, METADATA_NAME))

    build = build_multimodal if args.model == "multimodal" else build_unimodal
    model = build(cfg.arch, cfg.seed)
    if args.model == "multimodal":
        model.vectorizer = fit_vocab([r.dish_name for r in ds.train],
                                     max_vocab=cfg.arch.vocab_size,
                                     max_tokens=cfg.arch.max_tokens)

    try:
        model, log, state = train(model, ds.train, cfg)
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3

    ckpt = os.path.join(out, "checkpoint.bin")
    save_training_checkpoint(ckpt, model, state, extra={
        "dataset_fingerprint": fingerprint,
        "train_config": cfg.to_dict(),
        "epochs_completed": cfg.epochs,
        "train_count": len(ds.train),
        "test_count": len(ds.test),
    })
    log.write_csv(os.path.join(out, "train_log.csv"))
    _write_manifest(out, {
        "command": "train",
        "model": args.model,
        "data": os.path.abspath(args.data),
        "dataset_fingerprint": fingerprint,
        "config": cfg.to_dict(),
        "rows_read": load_report.total_rows, "rows_kept": load_report.kept,
        "rows_dropped": load_report.dropped,
        "train_count": len(ds.train), "test_count": len(ds.test),
        "parameters": param_count(model),
        "artifacts": {"checkpoint": "checkpoint.bin", "train_log": "train_log.csv"},
    })
    print(f"trained {args.model} model ({param_count(model)} parameters), "
          f"final epoch loss {log.epochs[-1][1]:.3f} kcal^2 -> {out}")
    return 0


def cmd_eval(args) -> int:
    out = _prepare_out(args.out or _default_out("eval"), args.force)
    model, _, extra = load_training_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(extra["train_config"])

    records, _ = load_dataset_dir(args.data, DEFAULT_MIN_KCAL, DEFAULT_MAX_KCAL)
    fingerprint = dataset_fingerprint(os.path.join(args.data, METADATA_NAME))
    if fingerprint != extra.get("dataset_fingerprint"):
        print("warning: dataset fingerprint differs from the checkpoint's "
              "training dataset", file=sys.stderr)
    ds = split(records, cfg.split_ratio, cfg.seed)
    side = ds.train if args.split == "train" else ds.test

    ps = evaluate(model, side)
    rep = report(ps)
    with open(os.path.join(out, "report.kv"), "w", encoding="utf-8") as f:
        f.write(rep.to_kv_text())
    scatter_emit(ps, os.path.join(out, "scatter"))
    _write_manifest(out, {
        "command": "eval",
        "checkpoint": os.path.abspath(args.checkpoint),
        "data": os.path.abspath(args.data),
        "split": args.split,
        "dataset_fingerprint": fingerprint,
        "fingerprint_matches_checkpoint": fingerprint == extra.get("dataset_fingerprint"),
        "n": rep.n,
        "artifacts": {"report": "report.kv", "scatter_data": "scatter.csv",
                      "scatter_plot": "scatter.svg"},
    })
    print(f"evaluated {rep.n} dishes: mae {rep.mae:.3f} kcal, "
          f"abs-err std {rep.abs_err_std:.3f} kcal, r2 {rep.r2:.4f} -> {out}")
    return 0


def _read_predictions(eval_dir: str) -> PredictionSet:
    path = os.path.join(eval_dir, "scatter.csv")
    dish_ids: list[str] = []
    y_true: list[float] = []
    y_pred: list[float] = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "dish_id,true_kcal,pred_kcal":
            raise SystemExit(f"{path}: unexpected header {header!r}")
        for line in f:
            dish_id, yt, yp = line.rstrip("\n").split(",")
            dish_ids.append(dish_id)
            y_true.append(float(yt))
            y_pred.append(float(yp))
    return PredictionSet(dish_ids, np.asarray(y_true), np.asarray(y_pred))


def cmd_compare(args) -> int:
    out = _prepare_out(args.out or _default_out("compare"), args.force)
    ps_a = _read_predictions(args.eval_a)
    ps_b = _read_predictions(args.eval_b)
    set_a, set_b = set(ps_a.dish_ids), set(ps_b.dish_ids)
    if set_a != set_b:
        offenders = sorted(set_a ^ set_b)[:5]
        raise PairingError(
            f"evaluations cover different dishes; first offenders: {offenders}")

    order = {d: i for i, d in enumerate(ps_b.dish_ids)}
    idx_b = [order[d] for d in ps_a.dish_ids]
    err_a = ps_a.abs_errors()
    err_b = ps_b.abs_errors()[idx_b]
    ttest = paired_t_test(err_a, err_b, alpha=args.alpha)
    summary = compare(report(ps_a), report(PredictionSet(
        [ps_b.dish_ids[i] for i in idx_b],
        ps_b.y_true[idx_b], ps_b.y_pred[idx_b])), ttest)

    with open(os.path.join(out, "comparison.kv"), "w", encoding="utf-8") as f:
        f.write(summary.to_kv_text())
    with open(os.path.join(out, "comparison.txt"), "w", encoding="utf-8") as f:
        f.write(summary.to_text())
    _write_manifest(out, {
        "command": "compare",
        "eval_a": os.path.abspath(args.eval_a), "eval_b": os.path.abspath(args.eval_b),
        "alpha": args.alpha, "n": summary.n,
        "artifacts": {"summary_kv": "comparison.kv", "summary_text": "comparison.txt"},
    })
    print(summary.to_text(), end="")
    return 0


def cmd_verify(args) -> int:
    suites = [args.suite] if args.suite else ["gradcheck", "stats", "pipeline"]
    failed = 0
    for suite in suites:
        for name, passed, detail in run_suite(suite):
            status = "PASS" if passed else "FAIL"
            print(f"[{status}] {suite}/{name}: {detail}")
            failed += 0 if passed else 1
    if failed:
        print(f"{failed} check(s) failed", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kcalnet",
        description="Calorie regression from dish images and names, "
                    "with a paired statistical comparison harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--text-signal", type=float, default=0.5, dest="text_signal")
    p.add_argument("--image-size", type=int, default=32, dest="image_size")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("unimodal", "multimodal"), required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--image-size", type=int, default=None, dest="image_size")
    p.add_argument("--no-augment", action="store_true", dest="no_augment")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired t-test between two evaluation outputs")
    p.add_argument("--eval-a", required=True, dest="eval_a",
                   help="evaluation dir of the expected-worse model")
    p.add_argument("--eval-b", required=True, dest="eval_b")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run built-in invariant suites")
    p.add_argument("--suite", choices=("gradcheck", "stats", "pipeline"), default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
