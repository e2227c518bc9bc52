"""Command-line entry point ``wifipose``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure
(1 for anything else the package raises on purpose).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, WifiPoseError
from .metrics import DEFAULT_ALPHAS


def _common(p: argparse.ArgumentParser, dataset=False, checkpoint=False) -> None:
    p.add_argument("--config", type=Path, help="run configuration (.json or .toml)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    if dataset:
        p.add_argument("--dataset", type=Path, required=True, help="dataset directory")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wifipose", description="WiFi CSI pose estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("synth", help="generate a synthetic dataset into --out"))
    _common(sub.add_parser("pretrain", help="self-supervised encoder pre-training"), dataset=True)
    _common(sub.add_parser("train-decoder", help="train the pose decoder on a frozen encoder"),
            dataset=True, checkpoint=True)

    p = sub.add_parser("eval", help="score a decoder checkpoint and write report.json")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--plots", action="store_true", help="also write loss-curve and pose-overlay images")

    _common(sub.add_parser("export-embeddings", help="write pooled embeddings as CSV"),
            dataset=True, checkpoint=True)

    p = sub.add_parser("plot", help="draw loss curves (and a pose overlay when --dataset is given)")
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--log", type=Path, help="loss-log CSV written by pretrain or train-decoder")
    return parser


def run(args: argparse.Namespace) -> dict:
    cfg = pipeline.load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        cfg["seed"] = args.seed
    out = args.out
    cmd = args.command
    if cmd == "synth":
        ds = pipeline.synth_run(cfg, out)
        return {"dataset": str(out), "N": len(ds)}
    if cmd == "pretrain":
        ckpt = pipeline.pretrain_run(cfg, args.dataset, out)
        return {"checkpoint": str(ckpt), "log": str(out / pipeline.PRETRAIN_LOG)}
    if cmd == "train-decoder":
        ckpt = pipeline.decode_train_run(cfg, args.checkpoint, args.dataset, out)
        return {"checkpoint": str(ckpt), "log": str(out / pipeline.DECODE_LOG)}
    if cmd == "eval":
        alphas = cfg["eval"].get("alphas", DEFAULT_ALPHAS)
        plots = args.plots or bool(cfg["eval"].get("plots", False))
        report = pipeline.evaluate_run(args.checkpoint, args.dataset, out, alphas=alphas, plots=plots)
        return {"mpjpe": report.mpjpe, "pa_mpjpe": report.pa_mpjpe, "pck": report.pck}
    if cmd == "export-embeddings":
        path = pipeline.export_embeddings(args.checkpoint, args.dataset, out / pipeline.EMBEDDINGS_FILE)
        return {"embeddings": str(path)}
    if cmd == "plot":
        paths = pipeline.plot_run(args.checkpoint, out, dataset=args.dataset, log=args.log)
        return {"plots": [str(p) for p in paths]}
    raise ConfigError(f"unknown command {cmd!r}")  # argparse normally prevents this


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(args)
    except WifiPoseError as exc:
        print(f"wifipose {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
