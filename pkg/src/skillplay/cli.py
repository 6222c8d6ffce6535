"""Command line interface.

Subcommands: run (iteration loop), score (re-score a question JSONL against
a bank), metrics (diagnostics from artifact files), bank (inspect/export),
report (render the trend CSV). Every config key is also accepted as a
--flag and overrides the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Optional

import yaml

from .backends import (
    BackendSpec,
    BackendSuite,
    HttpChatBackend,
    HttpEmbeddingBackend,
    Role,
    resolve_endpoint,
)
from .core import Config, ConfigError, Embedding, Question, validate_config
from .harness import (
    BANK_FILE,
    REPORT_FILE,
    read_jsonl,
    run_loop,
    score_embedded_batch,
    write_jsonl,
)
from .memory import BankLoadError, load_bank, save_bank
from .mock import ScenarioError
from .metrics import (
    JudgedRatio,
    cross_iteration_repetition,
    distribution_spread,
    intra_iteration_repetition,
    llm_rep_ratio,
    read_report,
    render_report,
)
from .mock import build_mock_suite, load_scenario
from .skills import SkillPipeline

log = logging.getLogger("skillplay")

_CONFIG_FLAG_KEYS = [f.name for f in dataclasses.fields(Config)]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for key in _CONFIG_FLAG_KEYS:
        parser.add_argument(f"--{key}", default=None, metavar="V")


def _load_config(args: argparse.Namespace) -> Config:
    raw: dict[str, Any] = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a flat key-value mapping")
        raw.update(loaded)
    for key in _CONFIG_FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return validate_config(raw)


def _http_spec(role: Role, entry: dict[str, Any]) -> BackendSpec:
    endpoint = entry.get("endpoint") or resolve_endpoint(role)
    if endpoint is None:
        raise ConfigError(
            f"no endpoint for role {role.value}: set it in the profile or via "
            f"SKILLPLAY_{role.value.upper()}_ENDPOINT"
        )
    kwargs: dict[str, Any] = {
        "role": role,
        "kind": "http",
        "endpoint": endpoint,
        "model_name": entry.get("model_name", ""),
    }
    for key in ("temperature", "top_p", "max_in_flight", "logprob_top_k"):
        if key in entry:
            kwargs[key] = entry[key]
    return BackendSpec(**kwargs)


def build_suite(args: argparse.Namespace, cfg: Config, seed: int) -> BackendSuite:
    """Mock suite from --scenario, or HTTP suite from --backend-profile."""
    profile_path = getattr(args, "backend_profile", None)
    scenario_path = getattr(args, "scenario", None)
    if profile_path is None and scenario_path is None:
        raise ConfigError("provide --backend-profile or --scenario (mock run)")
    if profile_path is None:
        scenario = load_scenario(scenario_path)
        return build_mock_suite(scenario, seed=seed, cfg=cfg)
    with open(profile_path, encoding="utf-8") as fh:
        profile = yaml.safe_load(fh) or {}
    if profile.get("kind", "http") == "mock":
        if scenario_path is None:
            raise ConfigError("mock profile requires --scenario")
        scenario = load_scenario(scenario_path)
        return build_mock_suite(scenario, seed=seed, cfg=cfg)
    roles = {}
    for role in Role:
        entry = profile.get(role.value, {})
        spec = _http_spec(role, entry)
        if role is Role.EMBEDDER:
            roles[role.value] = HttpEmbeddingBackend(spec)
        else:
            roles[role.value] = HttpChatBackend(spec)
    return BackendSuite(**roles)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    suite = build_suite(args, cfg, seed=args.seed)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    if args.bank and not os.path.exists(os.path.join(out_dir, "state.json")):
        bank = load_bank(args.bank)
        save_bank(bank, os.path.join(out_dir, BANK_FILE))
        state_seed = {
            "iteration": bank.iteration_watermark,
            "seed": args.seed,
            "n_questions": args.questions,
            "config": cfg.to_dict(),
        }
        with open(os.path.join(out_dir, "state.json"), "w", encoding="utf-8") as fh:
            json.dump(state_seed, fh, sort_keys=True, indent=2)
    artifacts = run_loop(
        cfg,
        suite,
        iterations=args.iterations,
        run_seed=args.seed,
        out_dir=out_dir,
        n_questions=args.questions,
    )
    for art in artifacts:
        r = art.report
        print(
            f"iteration {art.iteration}: generated={r.generated} valid={r.valid} "
            f"replayed={r.replayed} cross_rep="
            f"{'-' if r.cross_iter_rep is None else f'{r.cross_iter_rep:.4f}'}"
        )
    print(f"artifacts in {out_dir}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    bank = load_bank(args.bank) if args.bank else None
    rows = read_jsonl(args.infile)
    if not rows:
        write_jsonl(args.out, [])
        return 0

    pipeline: Optional[SkillPipeline] = None
    needs_pipeline = any("embedding" not in r or r["embedding"] is None for r in rows)
    if needs_pipeline:
        suite = build_suite(args, cfg, seed=args.seed)
        pipeline = SkillPipeline(suite.coder, suite.embedder, cfg)

    texts, embeddings, codes, consistencies = [], [], [], []
    for i, row in enumerate(rows):
        if "text" not in row:
            raise ConfigError(f"input row {i} has no 'text'")
        texts.append(row["text"])
        if row.get("embedding") is not None:
            embeddings.append(Embedding(row["embedding"]))
            codes.append(row.get("code"))
        else:
            question = Question(
                id=str(row.get("id", i)), text=row["text"], iteration=0
            )
            result = pipeline.skill_embedding(question)
            embeddings.append(result.embedding)
            codes.append(result.code)
        if row.get("consistency") is None:
            raise ConfigError(
                f"input row {i} has no 'consistency'; re-scoring requires it"
            )
        consistencies.append(float(row["consistency"]))

    breakdowns, assignment = score_embedded_batch(
        cfg, bank, texts, embeddings, codes, consistencies
    )
    out_rows = []
    for i, row in enumerate(rows):
        b = breakdowns[i]
        out_rows.append(
            {
                "id": row.get("id", i),
                "text": row["text"],
                "uncertainty": b.uncertainty,
                "p_rep": b.p_rep,
                "p_max": b.p_max,
                "p_mean": b.p_mean,
                "p_map": b.p_map,
                "total": b.total,
                "cluster": assignment.labels[i],
            }
        )
    write_jsonl(args.out, out_rows)
    print(f"scored {len(out_rows)} questions -> {args.out}")
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    rows = read_jsonl(args.batch)
    embedded = [r for r in rows if r.get("embedding")]
    embeddings = [Embedding(r["embedding"]) for r in embedded]
    bank = load_bank(args.bank) if args.bank else None
    out: dict[str, Any] = {
        "questions": len(rows),
        "embedded": len(embedded),
        "intra_iter_rep": intra_iteration_repetition(embeddings) if len(embeddings) >= 2 else None,
        "spread": distribution_spread(embeddings) if embeddings else None,
        "cross_iter_rep": None,
        "llm_rep_ratio": None,
        "llm_rep_coverage": None,
    }
    if bank is not None and len(bank) > 0 and embeddings:
        out["cross_iter_rep"] = cross_iteration_repetition(embeddings, bank)
    wants_judge = args.scenario or args.backend_profile
    if wants_judge and bank is not None and len(bank) >= args.judge_k and embedded:
        suite = build_suite(args, cfg, seed=args.seed)
        questions = [
            Question(id=r["id"], text=r["text"], iteration=int(r.get("iteration", 0)))
            for r in embedded
        ]
        judged: JudgedRatio = llm_rep_ratio(
            questions, embeddings, bank, suite.judge, k=args.judge_k
        )
        out["llm_rep_ratio"] = judged.value
        out["llm_rep_coverage"] = judged.coverage
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def _cmd_bank(args: argparse.Namespace) -> int:
    bank = load_bank(args.path)
    if args.action == "info":
        by_iteration: dict[int, int] = {}
        labeled = 0
        for record in bank.records:
            by_iteration[record.question.iteration] = (
                by_iteration.get(record.question.iteration, 0) + 1
            )
            if record.pseudo_label is not None:
                labeled += 1
        print(
            json.dumps(
                {
                    "records": len(bank),
                    "dim": bank.dim,
                    "watermark": bank.iteration_watermark,
                    "labeled": labeled,
                    "per_iteration": {str(k): v for k, v in sorted(by_iteration.items())},
                },
                sort_keys=True,
                indent=2,
            )
        )
    else:  # export
        rows = [
            {
                "id": r.question.id,
                "iteration": r.question.iteration,
                "text": r.question.text,
                "pseudo_label": r.pseudo_label,
                "consistency": r.consistency,
                "embedding": [float(v) for v in r.embedding.values],
            }
            for r in bank.records
        ]
        write_jsonl(args.out, rows)
        print(f"exported {len(rows)} records -> {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    path = args.csv or os.path.join(args.run, REPORT_FILE)
    sys.stdout.write(render_report(read_report(path)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillplay",
        description="Self-play curriculum engine with diversity-aware rewards",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full iteration loop")
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--iterations", type=int, default=3)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--bank", default=None, help="seed the run with an existing bank file")
    p_run.add_argument("--backend-profile", default=None)
    p_run.add_argument("--scenario", default=None, help="mock scenario YAML")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--questions", type=int, default=16)
    _add_config_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_score = sub.add_parser("score", help="re-score a question JSONL against a bank")
    p_score.add_argument("--config", default=None)
    p_score.add_argument("--bank", default=None)
    p_score.add_argument("--in", dest="infile", required=True)
    p_score.add_argument("--out", required=True)
    p_score.add_argument("--seed", type=int, default=0)
    p_score.add_argument("--backend-profile", default=None)
    p_score.add_argument("--scenario", default=None)
    _add_config_flags(p_score)
    p_score.set_defaults(func=_cmd_score)

    p_metrics = sub.add_parser("metrics", help="compute diagnostics from artifacts")
    p_metrics.add_argument("--config", default=None)
    p_metrics.add_argument("--batch", required=True, help="challenger_batch.jsonl")
    p_metrics.add_argument("--bank", default=None)
    p_metrics.add_argument("--judge-k", type=int, default=3)
    p_metrics.add_argument("--seed", type=int, default=0)
    p_metrics.add_argument("--backend-profile", default=None)
    p_metrics.add_argument("--scenario", default=None)
    _add_config_flags(p_metrics)
    p_metrics.set_defaults(func=_cmd_metrics)

    p_bank = sub.add_parser("bank", help="inspect or export a memory bank file")
    p_bank.add_argument("action", choices=["info", "export"])
    p_bank.add_argument("path")
    p_bank.add_argument("--out", default=None)
    p_bank.set_defaults(func=_cmd_bank)

    p_report = sub.add_parser("report", help="render the trend CSV")
    p_report.add_argument("--run", default=None, help="run directory")
    p_report.add_argument("--csv", default=None, help="explicit report.csv path")
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "bank" and args.action == "export" and not args.out:
        print("bank export requires --out", file=sys.stderr)
        return 2
    if args.command == "report" and not (args.run or args.csv):
        print("report requires --run or --csv", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, BankLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    main()
