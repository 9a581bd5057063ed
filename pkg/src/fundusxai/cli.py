"""Command-line interface.

Subcommands cover the full pipeline: synth, split, train, eval, explain,
xai-iou, mask-exp, report. Every command takes --config (JSON) and writes a
run manifest next to its artifacts.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 missing
upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import ConfigError, PipelineConfig, config_from_dict

COMMANDS = ("synth", "split", "train", "eval", "explain", "xai-iou", "mask-exp", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fundusxai",
        description="multi-task fundus pipeline with quantitative attention validation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap worker threads for per-image stages")
        if name == "train":
            p.add_argument("--shuffle-labels", action="store_true",
                           help="train the label-shuffled control model")
        if name == "xai-iou":
            p.add_argument("--shuffled", action="store_true",
                           help="score the label-shuffled control checkpoint")
    return parser


def _load_config(args) -> PipelineConfig:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if args.out is not None:
        raw["out_dir"] = args.out
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    return config_from_dict(raw)


def _dispatch(cfg: PipelineConfig, args) -> list:
    command = args.command
    if command == "synth":
        return pipeline.run_synth(cfg)
    if command == "split":
        return pipeline.run_split(cfg)
    if command == "train":
        return pipeline.run_train(cfg, shuffle_labels=args.shuffle_labels)
    if command == "eval":
        return pipeline.run_eval(cfg)
    if command == "explain":
        return pipeline.run_explain(cfg)
    if command == "xai-iou":
        return pipeline.run_xai_iou(cfg, shuffled=args.shuffled)
    if command == "mask-exp":
        return pipeline.run_mask_exp(cfg)
    if command == "report":
        return pipeline.run_report(cfg)
    raise ConfigError(f"unknown command {command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        artifacts, seconds = pipeline.timed(_dispatch, cfg, args)
        pipeline.write_run_manifest(cfg, args.command, artifacts, seconds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except pipeline.MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {len(artifacts)} artifact(s) in {seconds:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
