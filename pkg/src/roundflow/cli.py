"""Command-line entry point for the experiment suites."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import SUITES, ExperimentConfig, run_suite, sample_pinched
from .metrics import save_metric


def _add_common(parser):
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--n", type=int)
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--t-max", type=float, dest="t_max")


def _config_from_args(args, suite):
    data = {}
    if args.config is not None:
        data = json.loads(Path(args.config).read_text())
    data["suite"] = suite
    for key in ("seed", "n", "resolution", "workers", "t_max"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if getattr(args, "out", None) is not None:
        data["out_dir"] = str(args.out)
    return ExperimentConfig.from_dict(data)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="roundflow",
        description="gauge-controlled Ricci flow experiments on sphere metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for suite in SUITES:
        p = sub.add_parser(suite, help=f"run the {suite} suite")
        _add_common(p)
    pgen = sub.add_parser("gen", help="emit a sample pinched metric file")
    _add_common(pgen)
    pgen.add_argument("--amplitude", type=float, default=0.05)
    pgen.add_argument("--file", type=Path, default=Path("metric.json"))

    args = parser.parse_args(argv)
    if args.command == "gen":
        g = sample_pinched(
            seed=args.seed if args.seed is not None else 7,
            amplitude=args.amplitude,
            n=args.n if args.n is not None else 3,
            resolution=args.resolution if args.resolution is not None else 128,
        )
        save_metric(g, args.file)
        print(f"wrote {args.file}")
        return 0

    config = _config_from_args(args, args.command)
    status, summary = run_suite(config)
    report = json.loads(Path(summary).read_text())
    for gate in report["gates"]:
        verdict = "PASS" if gate["pass"] else "FAIL"
        print(
            f"[{verdict}] {gate['name']}: measured {gate['measured']:.6g} "
            f"vs threshold {gate['threshold']:.6g}"
        )
    print(f"summary: {summary}")
    return status


if __name__ == "__main__":
    sys.exit(main())
