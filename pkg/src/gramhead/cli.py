"""Command-line entry point: ``gramhead <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .io import emit_scatter, load_checkpoint, read_features, write_features
from .projection import extract_features, pca_2d
from .train import TrainConfig, evaluate, load_config, load_datasets, sweep, train

log = logging.getLogger("gramhead")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML file with TrainConfig fields")
    p.add_argument("--seed", type=int, help="model and shuffle seed")
    p.add_argument("--limit", type=int, help="use only the first N training examples")
    p.add_argument("--heads", type=int, help="number of head classifiers")
    p.add_argument("--lambda", dest="lam", type=float, help="decorrelation weight (negative decorrelates)")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _checkpoint_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    p.add_argument("--keep-heads", help="comma-separated head indices to keep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gramhead", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model and write metrics.csv and checkpoints")
    _common(p)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--stop-after", type=int, help="stop after this epoch index")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    _common(p)
    _checkpoint_args(p)

    p = sub.add_parser("diagnose", help="strength, correlation and bound of a checkpoint")
    _common(p)
    _checkpoint_args(p)

    p = sub.add_parser("sweep", help="train once per value of lambda or heads")
    _common(p)
    p.add_argument("--axis", choices=["lambda", "heads"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("export-features", help="write per-head embeddings and a PCA scatter")
    _common(p)
    _checkpoint_args(p)
    p.add_argument("--which", default="heads", help="'heads', a head index, or 'penultimate'")

    p = sub.add_parser("plot", help="PCA scatter SVG from a features CSV")
    p.add_argument("--features", required=True, help="features.csv from export-features")
    p.add_argument("--out", help="SVG path (default: next to the CSV)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _parse_value(text: str):
    value = yaml.safe_load(text)
    return tuple(value) if isinstance(value, list) else value


def _resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    config = load_config(args.config) if args.config else (base or TrainConfig())
    changes = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, text = item.split("=", 1)
        changes[key.strip()] = _parse_value(text)
    for key, value in (("seed", args.seed), ("limit", args.limit), ("heads", args.heads),
                       ("lam", args.lam), ("out_dir", args.out_dir)):
        if value is not None:
            changes[key] = value
    return config.replace(**changes) if changes else config


def _keep(text):
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--keep-heads expects comma-separated integers, got {text!r}") from exc


def _checkpoint_config(args) -> TrainConfig:
    _, header = load_checkpoint(args.checkpoint)
    stored = header.get("train_config")
    return _resolve_config(args, TrainConfig.from_mapping(stored) if stored else None)


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _report(result: dict) -> dict:
    out = {k: result[k] for k in ("top1", "per_head_top1", "loss_ce", "loss_dec")}
    diag = result["diagnostics"]
    if diag is not None:
        out.update(strength=diag.strength, rho=diag.correlation, bound=_clean(diag.bound),
                   pair_correlations=diag.pair_correlations)
    if result["notice"]:
        out["notice"] = result["notice"]
    return out


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    result = train(config, resume=args.resume, stop_after=args.stop_after, echo=print)
    if result.final is not None:
        print(json.dumps({"final": _report(result.final)}, sort_keys=True))
    return 0


def _cmd_eval(args, diagnostics_only=False) -> int:
    config = _checkpoint_config(args)
    _, val = load_datasets(config)
    result = evaluate(args.checkpoint, val, _keep(args.keep_heads), config.eval_batch_size)
    report = _report(result)
    if diagnostics_only:
        keys = ("strength", "rho", "bound", "pair_correlations", "notice")
        report = {k: report[k] for k in keys if k in report}
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    config = _resolve_config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    rows = sweep(config, args.axis, values, echo=print if args.verbose else None)
    print(f"wrote {Path(config.out_dir) / 'sweep.csv'} ({len(rows)} rows)")
    failed = [r for r in rows if r["status"] != "ok"]
    return 1 if failed and len(failed) == len(rows) else 0


def _scatter_from_csv(features_path, svg_path) -> None:
    heads, _, feats, _ = read_features(features_path)
    coords, _, _ = pca_2d(feats)
    emit_scatter(np.column_stack([coords, heads]), svg_path)


def _cmd_export(args) -> int:
    config = _checkpoint_config(args)
    _, val = load_datasets(config)
    model, _ = load_checkpoint(args.checkpoint)
    keep = _keep(args.keep_heads)
    if keep is not None:
        from .ensemble import prune_heads

        model = prune_heads(model, keep)
    which = args.which if args.which in ("heads", "penultimate") else int(args.which)
    feats = extract_features(model, val.images, which, config.eval_batch_size)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features(feats, val.labels, out / "features.csv")
    _scatter_from_csv(out / "features.csv", out / "scatter.svg")
    print(f"wrote {out / 'features.csv'} and {out / 'scatter.svg'}")
    return 0


def _cmd_plot(args) -> int:
    src = Path(args.features)
    dst = Path(args.out) if args.out else src.with_name("scatter.svg")
    _scatter_from_csv(src, dst)
    print(f"wrote {dst}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "diagnose": lambda a: _cmd_eval(a, diagnostics_only=True),
        "sweep": _cmd_sweep,
        "export-features": _cmd_export,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"gramhead {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
