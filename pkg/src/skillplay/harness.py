"""Iteration orchestration and artifact emission.

One iteration runs: challenger generation -> solver rollouts & validity ->
skill embeddings -> batch clustering and history penalties -> composite
rewards -> diagnostics -> solver training set with replay -> memory update.
This artifact emits reward-annotated datasets for an external trainer; it
performs no policy updates itself. All reductions run in a fixed order
(generation order == id order) so artifact files are byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as metrics_mod
from .backends import BackendSuite, TransportError, generate_questions, solve
from .core import Config, Embedding, Question, QuestionSource, RewardBreakdown, SimilarityMode
from .memory import (
    MemoryBank,
    MemoryRecord,
    map_penalty,
    max_similarity,
    mean_similarity,
    sample_replay,
    save_bank,
    load_bank,
)
from .mock import stable_seed
from .repetition import (
    ClusterAssignment,
    bleu_distance,
    cluster,
    pairwise_similarity,
    repetition_penalty,
    similarity_to_distance,
)
from .reward import consistency_score, group_answers, is_valid, pseudo_label, uncertainty_reward
from .skills import SkillPipeline, SkillResult

log = logging.getLogger("skillplay")

STATE_FILE = "state.json"
BANK_FILE = "bank.rdmb"
CACHE_FILE = "skill_cache.jsonl"
REPORT_FILE = "report.csv"


@dataclass(slots=True)
class ScoredQuestion:
    """One challenger generation with everything the trainer needs."""

    id: str
    iteration: int
    raw: str
    question: Optional[Question]
    well_formed: bool
    claimed_answer: Optional[str]
    consistency: Optional[float]
    pseudo_label: Optional[str]
    valid: bool
    skill: Optional[SkillResult]
    cluster_id: Optional[int]
    breakdown: RewardBreakdown

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "iteration": self.iteration,
            "text": self.question.text if self.question else None,
            "well_formed": self.well_formed,
            "claimed_answer": self.claimed_answer,
            "consistency": self.consistency,
            "pseudo_label": self.pseudo_label,
            "valid": self.valid,
            "uncertainty": self.breakdown.uncertainty,
            "p_rep": self.breakdown.p_rep,
            "p_max": self.breakdown.p_max,
            "p_mean": self.breakdown.p_mean,
            "p_map": self.breakdown.p_map,
            "total": self.breakdown.total,
            "cluster": self.cluster_id,
            "provenance": self.skill.provenance.value if self.skill else None,
            "code": self.skill.code if self.skill else None,
            "embedding": [float(v) for v in self.skill.embedding.values]
            if self.skill
            else None,
        }


@dataclass(frozen=True, slots=True)
class SolverSetEntry:
    id: str
    text: str
    label: str
    source: QuestionSource
    iteration: int

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "label": self.label,
            "source": self.source.value,
            "iteration": self.iteration,
        }


@dataclass(slots=True)
class IterationArtifacts:
    iteration: int
    challenger_batch: list[ScoredQuestion]
    solver_set: list[SolverSetEntry]
    report: metrics_mod.IterationReport
    bank_path: str


@dataclass(slots=True)
class RunState:
    bank: Optional[MemoryBank]
    iteration: int  # last completed iteration; 0 before the first


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _atomic_write(path: str, content: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(content)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_jsonl(path: str, rows: Sequence[dict]) -> None:
    _atomic_write(path, "".join(_dumps(r) + "\n" for r in rows))


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def build_distance_matrix(
    cfg: Config,
    embeddings: Sequence[Embedding],
    codes: Sequence[Optional[str]],
    texts: Sequence[str],
) -> np.ndarray:
    """Distance source for within-batch clustering, per the ablation switches.

    sam mode uses 1 - cosine over skill embeddings; disabling embedding
    similarity falls back to sentence BLEU over the abstracted code strings;
    bleu mode (the lexical baseline) uses BLEU over the question texts.
    """
    n = len(texts)
    if cfg.similarity_mode is SimilarityMode.SAM and cfg.use_embedding_similarity:
        return similarity_to_distance(pairwise_similarity(list(embeddings)))
    if cfg.similarity_mode is SimilarityMode.SAM:
        strings = [c if c is not None else t for c, t in zip(codes, texts)]
    else:
        strings = list(texts)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = bleu_distance(strings[i], strings[j])
    return d


def score_embedded_batch(
    cfg: Config,
    bank: Optional[MemoryBank],
    texts: Sequence[str],
    embeddings: Sequence[Embedding],
    codes: Sequence[Optional[str]],
    consistencies: Sequence[float],
) -> tuple[list[RewardBreakdown], ClusterAssignment]:
    """The single scoring path shared by the iteration loop, the `score`
    subcommand, and the trainer bridge."""
    n = len(texts)
    if not (len(embeddings) == len(codes) == len(consistencies) == n):
        raise ValueError("texts, embeddings, codes, consistencies must align")
    if n == 0:
        raise ValueError("cannot score an empty batch")

    distances = build_distance_matrix(cfg, embeddings, codes, texts)
    assignment = cluster(distances, cfg.cluster_threshold)
    p_reps = repetition_penalty(assignment)

    breakdowns: list[RewardBreakdown] = []
    for i in range(n):
        if bank is not None and len(bank) > 0:
            p_max = max_similarity(bank, embeddings[i])
            p_mean = mean_similarity(bank, embeddings[i])
        else:
            p_max = -1.0
            p_mean = -1.0
        p_map = map_penalty(p_max, p_mean, cfg)
        uncertainty = uncertainty_reward(consistencies[i])
        total = uncertainty - cfg.alpha * p_reps[i] - cfg.beta * p_map
        breakdowns.append(
            RewardBreakdown(
                uncertainty=uncertainty,
                p_rep=p_reps[i],
                p_max=p_max,
                p_mean=p_mean,
                p_map=p_map,
                total=total,
            )
        )
    return breakdowns, assignment


def _zero_breakdown() -> RewardBreakdown:
    return RewardBreakdown(
        uncertainty=0.0, p_rep=0.0, p_max=-1.0, p_mean=-1.0, p_map=0.0, total=0.0
    )


def run_challenger_phase(
    cfg: Config,
    suite: BackendSuite,
    bank: Optional[MemoryBank],
    pipeline: SkillPipeline,
    iteration: int,
    seed: int,
    n_questions: int,
    partial_path: Optional[str] = None,
) -> tuple[list[ScoredQuestion], list[tuple]]:
    """Generate, solve, embed, and reward one batch of questions.

    Malformed generations with recoverable text are scored like the rest and
    flagged; generations with no usable text get a zeroed breakdown. Also
    returns the generator token distributions (when the backend exposes
    logprobs) for the entropy diagnostic. On a backend failure mid-phase the
    raw generations are preserved at `partial_path` before re-raising.
    """
    gens = generate_questions(
        suite.challenger, n_questions, seed=stable_seed(seed, "generate", iteration)
    )
    ids = [f"it{iteration:04d}_q{i:03d}" for i in range(len(gens))]
    questions: list[Optional[Question]] = []
    for gid, gen in zip(ids, gens):
        questions.append(
            Question(id=gid, text=gen.text, iteration=iteration) if gen.text else None
        )

    def run_rollout(question: Optional[Question]):
        if question is None:
            return None
        return solve(
            suite.solver,
            question,
            cfg.solver_samples,
            seed=stable_seed(seed, "solve", question.id),
        )

    def run_skill(question: Optional[Question]):
        if question is None:
            return None
        return pipeline.skill_embedding(question)

    try:
        workers = max(1, suite.solver.spec.max_in_flight)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rollouts = list(pool.map(run_rollout, questions))
        coder_workers = max(1, suite.coder.spec.max_in_flight)
        with ThreadPoolExecutor(max_workers=coder_workers) as pool:
            skills = list(pool.map(run_skill, questions))
    except TransportError:
        if partial_path is not None:
            write_jsonl(
                partial_path,
                [
                    {"id": gid, "raw": gen.raw, "well_formed": gen.well_formed}
                    for gid, gen in zip(ids, gens)
                ],
            )
        raise

    consistencies: list[Optional[float]] = []
    labels: list[Optional[str]] = []
    for rollout in rollouts:
        if rollout is None:
            consistencies.append(None)
            labels.append(None)
            continue
        groups = group_answers(rollout)
        consistencies.append(consistency_score(groups))
        labels.append(pseudo_label(groups))

    scorable = [i for i, q in enumerate(questions) if q is not None]
    breakdown_by_index: dict[int, RewardBreakdown] = {}
    cluster_by_index: dict[int, int] = {}
    if scorable:
        breakdowns, assignment = score_embedded_batch(
            cfg,
            bank,
            texts=[questions[i].text for i in scorable],
            embeddings=[skills[i].embedding for i in scorable],
            codes=[skills[i].code for i in scorable],
            consistencies=[consistencies[i] for i in scorable],
        )
        for pos, i in enumerate(scorable):
            breakdown_by_index[i] = breakdowns[pos]
            cluster_by_index[i] = assignment.labels[pos]

    out: list[ScoredQuestion] = []
    for i, gen in enumerate(gens):
        question = questions[i]
        consistency = consistencies[i]
        valid = (
            gen.well_formed
            and consistency is not None
            and is_valid(consistency, cfg)
        )
        out.append(
            ScoredQuestion(
                id=ids[i],
                iteration=iteration,
                raw=gen.raw,
                question=question,
                well_formed=gen.well_formed,
                claimed_answer=gen.claimed_answer,
                consistency=consistency,
                pseudo_label=labels[i],
                valid=valid,
                skill=skills[i],
                cluster_id=cluster_by_index.get(i),
                breakdown=breakdown_by_index.get(i, _zero_breakdown()),
            )
        )
    rollout_dists = [
        list(gen.token_distributions)
        for gen in gens
        if gen.token_distributions is not None
    ]
    return out, rollout_dists


def run_solver_phase(
    cfg: Config,
    bank: Optional[MemoryBank],
    scored: Sequence[ScoredQuestion],
    iteration: int,
    seed: int,
) -> tuple[list[SolverSetEntry], list[MemoryRecord]]:
    """Assemble the solver training set: valid labeled questions plus a
    replay sample from history at the target ratio."""
    current = [s for s in scored if s.valid and s.pseudo_label is not None]
    entries = [
        SolverSetEntry(
            id=s.id,
            text=s.question.text,
            label=s.pseudo_label,
            source=QuestionSource.GENERATED,
            iteration=iteration,
        )
        for s in current
    ]
    replayed: list[MemoryRecord] = []
    if bank is not None:
        replayed = sample_replay(
            bank, len(current), cfg, seed=stable_seed(seed, "replay", iteration)
        )
    for record in replayed:
        entries.append(
            SolverSetEntry(
                id=record.question.id,
                text=record.question.text,
                label=record.pseudo_label,
                source=QuestionSource.REPLAYED,
                iteration=record.question.iteration,
            )
        )
    if not current:
        log.warning("iteration %d produced no valid labeled questions", iteration)
    return entries, replayed


def _iteration_dir(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, f"iter_{iteration:04d}")


def _rebuild_report_csv(out_dir: str, upto_iteration: int) -> None:
    """Regenerate report.csv from the per-iteration row files.

    Rebuilding (rather than appending) keeps the file correct after a crash
    between the row write and the state write.
    """
    rows = []
    for t in range(1, upto_iteration + 1):
        row_path = os.path.join(_iteration_dir(out_dir, t), "report_row.json")
        if os.path.exists(row_path):
            with open(row_path, encoding="utf-8") as fh:
                rows.append(metrics_mod.IterationReport(**json.load(fh)))
    tmp_path = os.path.join(out_dir, REPORT_FILE + ".tmp")
    if os.path.exists(tmp_path):
        os.remove(tmp_path)
    for report in rows:
        metrics_mod.append_report_row(tmp_path, report)
    if not rows:
        _atomic_write(tmp_path, ",".join(metrics_mod.REPORT_COLUMNS) + "\r\n")
    os.replace(tmp_path, os.path.join(out_dir, REPORT_FILE))


def run_iteration(
    cfg: Config,
    suite: BackendSuite,
    state: RunState,
    run_seed: int,
    out_dir: str,
    n_questions: int,
    pipeline: SkillPipeline,
    judge_k: int = 3,
    phase_hook: Optional[Callable[[str], None]] = None,
) -> IterationArtifacts:
    """Run one full iteration and persist its artifacts.

    The bank file is only replaced by the atomic write at the end, so a
    failure at any phase leaves the previous state recoverable.
    """
    iteration = state.iteration + 1
    it_dir = _iteration_dir(out_dir, iteration)
    os.makedirs(it_dir, exist_ok=True)
    suite.observe_bank(state.bank, cfg)

    def hook(phase: str) -> None:
        if phase_hook is not None:
            phase_hook(phase)

    try:
        scored, rollout_dists = run_challenger_phase(
            cfg,
            suite,
            state.bank,
            pipeline,
            iteration,
            run_seed,
            n_questions,
            partial_path=os.path.join(it_dir, "challenger_batch.partial.jsonl"),
        )
    except TransportError:
        log.error("challenger phase aborted at iteration %d", iteration)
        raise
    pipeline.flush_cache()
    hook("challenger")

    bank = state.bank
    embedded = [s for s in scored if s.skill is not None]
    embeddings = [s.skill.embedding for s in embedded]
    detail_rows: list[dict] = []

    cross = None
    judged = None
    if bank is not None and len(bank) > 0 and embeddings:
        cross = metrics_mod.cross_iteration_repetition(embeddings, bank)
    intra = metrics_mod.intra_iteration_repetition(embeddings) if embeddings else None
    spread = metrics_mod.distribution_spread(embeddings) if embeddings else None
    if bank is not None and len(bank) >= judge_k and embedded:
        judged = metrics_mod.llm_rep_ratio(
            [s.question for s in embedded], embeddings, bank, suite.judge, k=judge_k
        )
    entropy = metrics_mod.challenger_entropy(rollout_dists) if rollout_dists else None

    solver_set, replayed = run_solver_phase(cfg, bank, scored, iteration, run_seed)
    hook("solver")

    valid_tuples = [
        (s.question, s.skill.embedding, s.consistency, s.pseudo_label)
        for s in scored
        if s.valid
    ]
    if valid_tuples and bank is None:
        dim = valid_tuples[0][1].dim
        bank = MemoryBank(dim=dim)
    if bank is not None:
        bank.ingest(iteration, valid_tuples, cfg)

    for s in embedded:
        detail_rows.append(
            {
                "id": s.id,
                "p_max": s.breakdown.p_max,
                "p_mean": s.breakdown.p_mean,
                "cluster": s.cluster_id,
            }
        )

    generated = len(scored)
    n_valid = sum(1 for s in scored if s.valid)
    report = metrics_mod.IterationReport(
        iteration=iteration,
        cross_iter_rep=cross,
        intra_iter_rep=intra,
        llm_rep_ratio=judged.value if judged else None,
        llm_rep_coverage=judged.coverage if judged else None,
        spread=spread,
        challenger_entropy=entropy,
        generated=generated,
        valid=n_valid,
        replayed=len(replayed),
    )

    write_jsonl(
        os.path.join(it_dir, "challenger_batch.jsonl"),
        [s.to_json_dict() for s in scored],
    )
    write_jsonl(
        os.path.join(it_dir, "solver_set.jsonl"), [e.to_json_dict() for e in solver_set]
    )
    write_jsonl(os.path.join(it_dir, "metrics_detail.jsonl"), detail_rows)
    _atomic_write(
        os.path.join(it_dir, "report_row.json"),
        json.dumps(dataclasses.asdict(report), sort_keys=True, indent=2) + "\n",
    )
    _rebuild_report_csv(out_dir, iteration)

    bank_path = os.path.join(out_dir, BANK_FILE)
    if bank is not None:
        save_bank(bank, bank_path)
    hook("persist")

    state.bank = bank
    state.iteration = iteration
    _atomic_write(
        os.path.join(out_dir, STATE_FILE),
        json.dumps(
            {
                "iteration": iteration,
                "seed": run_seed,
                "n_questions": n_questions,
                "config": cfg.to_dict(),
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
    )
    return IterationArtifacts(
        iteration=iteration,
        challenger_batch=scored,
        solver_set=solver_set,
        report=report,
        bank_path=bank_path,
    )


def load_state(out_dir: str, cfg: Config, run_seed: int, n_questions: int) -> RunState:
    """Resume from a previous run directory, verifying the invocation matches."""
    state_path = os.path.join(out_dir, STATE_FILE)
    if not os.path.exists(state_path):
        return RunState(bank=None, iteration=0)
    with open(state_path, encoding="utf-8") as fh:
        stored = json.load(fh)
    if stored["seed"] != run_seed or stored["n_questions"] != n_questions:
        raise ValueError("run directory was created with a different seed or batch size")
    if stored["config"] != cfg.to_dict():
        raise ValueError("run directory was created with a different config")
    bank_path = os.path.join(out_dir, BANK_FILE)
    bank = load_bank(bank_path) if os.path.exists(bank_path) else None
    if bank is not None:
        # A crash between the bank write and the state write leaves one extra
        # iteration in the bank; records are append-ordered so it is a suffix.
        bank.rollback_to(stored["iteration"])
    return RunState(bank=bank, iteration=stored["iteration"])


def run_loop(
    cfg: Config,
    suite: BackendSuite,
    iterations: int,
    run_seed: int,
    out_dir: str,
    n_questions: int,
    judge_k: int = 3,
    phase_hook: Optional[Callable[[str], None]] = None,
) -> list[IterationArtifacts]:
    """Run (or resume) the loop until `iterations` are completed."""
    os.makedirs(out_dir, exist_ok=True)
    state = load_state(out_dir, cfg, run_seed, n_questions)
    pipeline = SkillPipeline(
        suite.coder, suite.embedder, cfg, cache_path=os.path.join(out_dir, CACHE_FILE)
    )
    artifacts = []
    while state.iteration < iterations:
        artifacts.append(
            run_iteration(
                cfg,
                suite,
                state,
                run_seed,
                out_dir,
                n_questions,
                pipeline,
                judge_k=judge_k,
                phase_hook=phase_hook,
            )
        )
    return artifacts
