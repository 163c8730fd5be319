"""Command-line entry point: ``profiling-agent <stage> --model ID ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, MissingArtifacts, ProfilingAgentError
from .pipeline import STAGES, build_config, closure, load_config_file, run_pipeline
from .report import render_report

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
COMMANDS = STAGES + ("run", "report")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file of flat config keys; flags override it")
    p.add_argument("--model", help="registry id or in-repo fixture id")
    p.add_argument("--dataset", help="synthetic-2class, synthetic-10class, imagenette, cifar10, cifar100, "
                                     "imagenet-1k-val-subset or a class-per-folder directory")
    p.add_argument("--device", help="cpu or accelerator")
    p.add_argument("--llm-backend", dest="llm_backend", choices=("live", "scripted"))
    p.add_argument("--llm-model", dest="llm_model")
    p.add_argument("--fixtures", help="scripted LLM responses: JSON list file or directory")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--method", choices=("l1", "l2", "random", "quant-int8"))
    p.add_argument("--importance", choices=("l1", "l2", "random"),
                   help="channel selection for agent pruning (default l2)")
    p.add_argument("--warmup", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--weights", choices=("pretrained", "random"))
    p.add_argument("--clock", choices=("monotonic", "ticks"))
    p.add_argument("--compose", action="store_true", default=None,
                   help="quantize the pruned model instead of the original")
    p.add_argument("--static-only", dest="static_only", action="store_true",
                   help="skip dynamic (timed) profiling")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--runs-dir", dest="runs_dir")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profiling-agent",
                                     description="Profiling-guided pruning and quantization of vision models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("--run-id", dest="run_id", required=True)
            p.add_argument("--runs-dir", dest="runs_dir", default="runs")
        else:
            _common(p)
    return parser


def config_values(args: argparse.Namespace) -> dict:
    values = load_config_file(args.config) if args.config else {}
    for key in ("model", "dataset", "device", "llm_backend", "llm_model", "fixtures", "seed", "iterations",
                "ratio", "importance", "warmup", "repeats", "weights", "clock", "compose", "run_id", "runs_dir"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.samples is not None:
        values["samples"] = args.samples
    if args.static_only:
        values["dynamic_profile"] = False
    method = args.method
    if method is not None:
        if args.command in ("prune", "iterate") and method != "quant-int8":
            values["importance"] = method
        else:
            values["method"] = method
    if args.command == "baseline":
        values["stages"] = ["baseline"]
        values.setdefault("method", "l1")
    elif args.command != "run":
        values["stages"] = closure(args.command)
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            sys.stdout.write(render_report(Path(args.runs_dir) / args.run_id))
        except MissingArtifacts as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_STAGE
        return EXIT_OK
    try:
        config = build_config(config_values(args))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run_pipeline(config)
    except ProfilingAgentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for stage, info in manifest.stages.items():
        detail = f" ({info['detail']})" if info.get("detail") else ""
        print(f"{stage:<9} {info['status']}{detail}")
    print(f"run directory: {config.run_dir}")
    report = config.run_dir / "report.txt"
    if report.is_file():
        sys.stdout.write(report.read_text())
    failed = any(info["status"] == "failed" for info in manifest.stages.values())
    return EXIT_STAGE if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
