#!/usr/bin/env python3
"""Run the full mock loop at desk scale and print the trend table."""

import argparse
import os

from skillplay.core import validate_config
from skillplay.harness import REPORT_FILE, run_loop
from skillplay.metrics import read_report, render_report
from skillplay.mock import build_mock_suite, load_scenario, synthetic_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scenario", default=None, help="scenario YAML (default: 40 synthetic families)")
    parser.add_argument("--iterations", type=int, default=3)
    parser.add_argument("--questions", type=int, default=16)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--beta", type=float, default=1.0)
    parser.add_argument("--out", default="runs/mock_demo")
    args = parser.parse_args()

    cfg = validate_config({"beta": args.beta})
    scenario = (
        load_scenario(args.scenario) if args.scenario else synthetic_scenario(n_families=40)
    )
    suite = build_mock_suite(scenario, seed=args.seed, cfg=cfg)
    run_loop(
        cfg,
        suite,
        iterations=args.iterations,
        run_seed=args.seed,
        out_dir=args.out,
        n_questions=args.questions,
    )
    print(render_report(read_report(os.path.join(args.out, REPORT_FILE))))
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    main()
