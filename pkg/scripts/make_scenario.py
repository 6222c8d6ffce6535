#!/usr/bin/env python3
"""Emit a synthetic mock scenario YAML with an arbitrary family count.

Larger pools give the penalty-aware challenger room to explore, which is
what the diversity-trend experiments need.
"""

import argparse

import yaml

from skillplay.mock import synthetic_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--families", type=int, default=40)
    parser.add_argument("--accuracy", type=float, default=0.6)
    parser.add_argument(
        "--policy", choices=["penalty_aware", "ignore"], default="penalty_aware"
    )
    parser.add_argument("--malformed-rate", type=float, default=0.0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    scenario = synthetic_scenario(
        n_families=args.families,
        accuracy=args.accuracy,
        policy=args.policy,
        malformed_rate=args.malformed_rate,
    )
    raw = {
        "dim": scenario.dim,
        "challenger_policy": scenario.challenger_policy,
        "malformed_rate": scenario.malformed_rate,
        "unparseable_rate": scenario.unparseable_rate,
        "families": [
            {
                "id": f.id,
                "templates": list(f.templates),
                "program": f.program,
                "answer": f.answer,
                "accuracy": f.accuracy,
                "codeable": f.codeable,
                "params": {k: list(v) for k, v in f.params.items()},
            }
            for f in scenario.families
        ],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        yaml.safe_dump(raw, fh, sort_keys=False)
    print(f"wrote {len(scenario.families)} families -> {args.out}")


if __name__ == "__main__":
    main()
