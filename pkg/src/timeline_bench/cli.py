"""Command-line entry point: ``tlb <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 file system error.
Outputs go to ``--out`` (written only after the command succeeds) or stdout;
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .data import (
    ConfigError,
    DatasetError,
    GenConfig,
    dataset_stats,
    generate_synthetic,
    parse_dataset,
    parse_predictions,
    write_dataset,
    write_predictions,
)
from .metrics import ScoreConfig, ScoringError, format_table, score_dataset
from .numerics import ShapeError
from .train import Checkpoint, TrainConfig, evaluate, grid_search, predict, train

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
MODEL_FLAGS = {"v": "v", "tri": "tri", "tri-distill": "tri_distill"}

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here 2 means a file system error
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _atomic_write(path: str, payload: bytes) -> None:
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent or ".", prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _emit(payload: bytes, out: str | None) -> None:
    if out:
        _atomic_write(out, payload)
    else:
        sys.stdout.write(payload.decode("utf-8"))


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")


def _read_json(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _load_dataset(path: str):
    try:
        return parse_dataset(Path(path).read_bytes())
    except DatasetError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _threads(args) -> int:
    if args.threads is not None:
        value = args.threads
    else:
        env = os.environ.get("TLB_THREADS", "1")
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"TLB_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError("thread count must be >= 1")
    return value


def _sigma(args) -> ScoreConfig:
    return ScoreConfig(args.sigma)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(_read_json(args.config)) if args.config else TrainConfig()
    model = cfg.model
    if args.model is not None:
        model = replace(model, model_kind=MODEL_FLAGS[args.model])
    if getattr(args, "no_video_pe", False):
        model = replace(model, use_video_pe=False)
    if getattr(args, "no_encoders_23", False):
        model = replace(model, use_encoders_2_3=False)
    cfg = replace(cfg, model=model)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _report_bytes(report, fmt: str) -> bytes:
    if fmt == "json":
        return _json_bytes(report.to_json())
    return (format_table(report) + "\n").encode("utf-8")


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg = GenConfig.from_json(_read_json(args.config)) if args.config else GenConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    _emit(write_dataset(generate_synthetic(cfg)), args.out)


def cmd_stats(args) -> None:
    stats = dataset_stats(_load_dataset(args.data))
    if args.format == "json":
        _emit(_json_bytes(stats.to_json()), args.out)
        return
    lines = [
        f"timelines  {stats.num_timelines}",
        f"nodes      {stats.num_nodes}",
        f"videos     {stats.num_videos}",
    ]
    for title, hist in (
        ("videos per node", stats.videos_per_node),
        ("nodes per timeline", stats.nodes_per_timeline),
        ("videos per timeline", stats.videos_per_timeline),
    ):
        lines.append(f"{title}: " + ", ".join(f"{k}:{v}" for k, v in hist.items()))
    _emit(("\n".join(lines) + "\n").encode("utf-8"), args.out)


def cmd_score(args) -> None:
    gt = _load_dataset(args.gt)
    try:
        preds = parse_predictions(Path(args.pred).read_bytes())
    except DatasetError as exc:
        raise type(exc)(f"{args.pred}: {exc}") from None
    report = score_dataset(gt, preds, _sigma(args), postprocess=args.postprocess, threads=_threads(args))
    _emit(_report_bytes(report, args.format), args.out)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    train_ds, val_ds = _load_dataset(args.data), _load_dataset(args.val)
    teacher = Checkpoint.load(args.teacher_ckpt) if args.teacher_ckpt else None
    ckpt, report = train(train_ds, val_ds, cfg, teacher=teacher)
    if report.diverged:
        raise ConfigError("training diverged (non-finite loss); try a smaller learning rate")
    blob = ckpt.to_bytes()
    if args.report:
        _atomic_write(args.report, _json_bytes(report.to_json()))
    _atomic_write(args.out_ckpt, blob)
    print(json.dumps({"best_epoch": report.best_epoch, cfg.selection_metric: report.best_selection}))


def cmd_predict(args) -> None:
    ckpt = Checkpoint.load(args.ckpt)
    preds = predict(ckpt, _load_dataset(args.data), postprocess=not args.raw)
    _emit(write_predictions(preds), args.out)


def cmd_eval(args) -> None:
    ckpt = Checkpoint.load(args.ckpt)
    report = evaluate(ckpt, _load_dataset(args.data), _sigma(args).sigma, threads=_threads(args))
    _emit(_report_bytes(report, args.format), args.out)


def cmd_grid(args) -> None:
    cfg = _train_config(args)
    if args.grid_config:
        doc = _read_json(args.grid_config)
        unknown = set(doc) - {"lr_grid", "dropout_grid"}
        if unknown:
            raise ConfigError(f"unknown grid fields: {sorted(unknown)}")
        cfg = replace(cfg, **{k: tuple(v) for k, v in doc.items()})
    train_ds, val_ds = _load_dataset(args.data), _load_dataset(args.val)
    best_cfg, ckpt, results = grid_search(train_ds, val_ds, cfg)
    summary = {
        "best": {"learning_rate": best_cfg.learning_rate, "dropout_p": best_cfg.dropout_p},
        "cells": [
            {**r.__dict__, "selection": r.selection if math.isfinite(r.selection) else None} for r in results
        ],
    }
    if args.out_ckpt:
        _atomic_write(args.out_ckpt, ckpt.to_bytes())
    _emit(_json_bytes(summary), args.out)


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tlb", description="Video timeline modeling: data, metrics and models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(p):
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: $TLB_THREADS or 1)")

    def fmt(p):
        p.add_argument("--format", choices=("table", "json"), default="table")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="GenConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path (default stdout)")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("stats", help="dataset histograms")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    fmt(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("score", help="score predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--sigma", type=float, default=0.5, help="IoU threshold for node matching")
    p.add_argument("--postprocess", action="store_true", help="renumber predicted ids to skip empty nodes first")
    p.add_argument("--out")
    fmt(p)
    threads(p)
    p.set_defaults(fn=cmd_score)

    for name, help_text in (("train", "train one model"), ("grid", "learning-rate x dropout grid search")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", required=True, help="training dataset")
        p.add_argument("--val", required=True, help="validation dataset")
        p.add_argument("--model", choices=sorted(MODEL_FLAGS))
        p.add_argument("--config", help="TrainConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--no-video-pe", action="store_true", help="drop the video position encoding")
        p.add_argument("--no-encoders-23", action="store_true", help="skip the node-only and video-only encoders")
        if name == "train":
            p.add_argument("--out-ckpt", required=True)
            p.add_argument("--teacher-ckpt", help="frozen teacher for --model tri-distill")
            p.add_argument("--report", help="write the TrainReport JSON here")
            p.set_defaults(fn=cmd_train)
        else:
            p.add_argument("--grid-config", help='JSON with "lr_grid" and/or "dropout_grid"')
            p.add_argument("--out-ckpt")
            p.add_argument("--out")
            p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("predict", help="write node ids for every sample")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--raw", action="store_true", help="skip the empty-node renumbering")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="predict and score in one step")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--out")
    fmt(p)
    threads(p)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DatasetError, ConfigError, ScoringError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
