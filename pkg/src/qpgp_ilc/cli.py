"""Command-line interface: run, summarize, validate, list-plants."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import ExperimentConfig, run, summarize_directory
from .errors import QpgpIlcError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

PLANTS = {
    "vehicle": "raceline-tracking kinematic bicycle with corrupted steering (n=1, m=1)",
    "manipulator": "3-link planar arm tracking a circle with joint biases (n=2, m=3)",
}


def _resolve_out_dir(args, config: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    configured = config.raw.get("output_dir")
    root = os.environ.get("QPGP_ILC_OUT", ".")
    if configured:
        configured = Path(configured)
        return configured if configured.is_absolute() else Path(root) / configured
    return Path(root) / f"run_{config.plant_name}"


def _add_common(parser):
    parser.add_argument("--out", help="output directory (overrides config/output_dir)")
    parser.add_argument(
        "--seed-override",
        help="comma-separated seeds replacing the config's seed list",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qpgp-ilc",
        description="Iterative-learning-control benchmarks with predictive error models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to the experiment JSON")
    p_run.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPUs)")
    _add_common(p_run)

    p_sum = sub.add_parser("summarize", help="recompute the summary for a run directory")
    p_sum.add_argument("directory", help="run output directory")
    p_sum.add_argument("--quiet", action="store_true")

    p_val = sub.add_parser("validate", help="check a config file against the schema")
    p_val.add_argument("config", help="path to the experiment JSON")

    sub.add_parser("list-plants", help="list available simulated plants")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "list-plants":
        for name, desc in PLANTS.items():
            print(f"{name}: {desc}")
        return EXIT_OK

    if args.command == "validate":
        try:
            ExperimentConfig.from_file(args.config)
        except (QpgpIlcError, OSError) as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK

    if args.command == "summarize":
        try:
            summary = summarize_directory(args.directory)
        except (QpgpIlcError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        out = Path(args.directory) / "summary.json"
        with open(out, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        if not args.quiet:
            for name, stats in summary["controllers"].items():
                print(
                    f"{name}: final10 rms={stats['mean_final10_rms']:.4g} "
                    f"compute={stats['total_compute_s']:.3g}s"
                )
        return EXIT_OK

    # run
    try:
        config = ExperimentConfig.from_file(args.config)
        if args.seed_override:
            seeds = [int(s) for s in args.seed_override.split(",") if s.strip()]
            if not seeds:
                raise QpgpIlcError("empty seed override")
            config = ExperimentConfig(raw={**config.raw, "seeds": seeds})
    except (QpgpIlcError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = _resolve_out_dir(args, config)
    try:
        code = run(config, out_dir, jobs=args.jobs, quiet=args.quiet)
    except QpgpIlcError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not args.quiet:
        print(f"results in {out_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
