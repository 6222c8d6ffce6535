"""Per-iteration diversity diagnostics.

Five views of the generated question stream: similarity to the historical
bank (max+mean cosine), within-batch pairwise similarity, an LLM-judged
duplicate ratio against nearest neighbors, dispersion around the embedding
centroid, and generator token entropy. Cold-start iterations report the
cross-iteration metrics as undefined rather than fabricating a trend point.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backends import ChatBackend, DuplicateVerdict, TokenDistribution, TransportError, judge_duplicate
from .core import Embedding, Question
from .memory import MemoryBank, MemoryRecord


@dataclass(frozen=True, slots=True)
class JudgedRatio:
    """Duplicate ratio plus the fraction of questions actually judged."""

    value: Optional[float]
    coverage: float
    duplicates: int
    judged: int


@dataclass(frozen=True, slots=True)
class IterationReport:
    iteration: int
    cross_iter_rep: Optional[float]
    intra_iter_rep: Optional[float]
    llm_rep_ratio: Optional[float]
    llm_rep_coverage: Optional[float]
    spread: Optional[float]
    challenger_entropy: Optional[float]
    generated: int
    valid: int
    replayed: int

    def __post_init__(self) -> None:
        if self.llm_rep_ratio is not None and not 0.0 <= self.llm_rep_ratio <= 1.0:
            raise ValueError("llm_rep_ratio must be in [0, 1]")
        if self.spread is not None and self.spread < 0.0:
            raise ValueError("spread must be non-negative")
        if self.challenger_entropy is not None and self.challenger_entropy < -1e-12:
            raise ValueError("entropy must be non-negative")


def _stack(embeddings: Sequence[Embedding]) -> np.ndarray:
    return np.stack([e.as_float64() for e in embeddings])


def cross_iteration_repetition(
    embeddings: Sequence[Embedding], bank: MemoryBank
) -> Optional[float]:
    """Mean over questions of (max bank cosine + mean bank cosine) / 2.

    Undefined (None) on an empty bank: iteration 1 has no history to recycle.
    """
    if len(bank) == 0:
        return None
    if not embeddings:
        raise ValueError("need at least one embedding")
    q = _stack(embeddings)
    m = np.stack([r.embedding.as_float64() for r in bank.records])
    sims = q @ m.T
    per_q = 0.5 * sims.max(axis=1) + 0.5 * sims.mean(axis=1)
    return float(per_q.mean())


def intra_iteration_repetition(embeddings: Sequence[Embedding]) -> Optional[float]:
    """Mean pairwise cosine over ordered pairs i != j; undefined for n < 2."""
    n = len(embeddings)
    if n < 2:
        return None
    q = _stack(embeddings)
    sims = q @ q.T
    total = float(sims.sum() - np.trace(sims))
    return total / (n * (n - 1))


def top_k_neighbors(bank: MemoryBank, e: Embedding, k: int) -> list[MemoryRecord]:
    """k most similar bank records; ties resolve to the earliest record."""
    if len(bank) < k:
        raise ValueError(f"bank has {len(bank)} records, need at least {k}")
    m = np.stack([r.embedding.as_float64() for r in bank.records])
    sims = m @ e.as_float64()
    order = sorted(range(len(bank)), key=lambda i: (-sims[i], i))
    records = bank.records
    return [records[i] for i in order[:k]]


def llm_rep_ratio(
    questions: Sequence[Question],
    embeddings: Sequence[Embedding],
    bank: MemoryBank,
    judge: ChatBackend,
    k: int = 3,
) -> JudgedRatio:
    """Fraction of questions the judge marks duplicate of their top-k
    historical neighbors. Transport failures leave the metric partial with a
    coverage fraction instead of failing the iteration."""
    if len(questions) != len(embeddings):
        raise ValueError("one embedding per question required")
    if not questions:
        raise ValueError("need at least one question")
    if len(bank) < k:
        raise ValueError(f"bank has {len(bank)} records, need at least {k}")
    duplicates = 0
    judged = 0
    for question, emb in zip(questions, embeddings):
        refs = [r.question for r in top_k_neighbors(bank, emb, k)]
        try:
            verdict = judge_duplicate(judge, question, refs)
        except TransportError:
            continue
        judged += 1
        if verdict is DuplicateVerdict.DUPLICATE:
            duplicates += 1
    value = duplicates / judged if judged else None
    return JudgedRatio(
        value=value,
        coverage=judged / len(questions),
        duplicates=duplicates,
        judged=judged,
    )


def distribution_spread(embeddings: Sequence[Embedding]) -> float:
    """Mean Euclidean distance to the (un-normalized) embedding centroid."""
    if not embeddings:
        raise ValueError("need at least one embedding")
    q = _stack(embeddings)
    centroid = q.mean(axis=0)
    return float(np.linalg.norm(q - centroid, axis=1).mean())


def challenger_entropy(
    rollouts: Sequence[Sequence[TokenDistribution]],
) -> Optional[float]:
    """Mean over rollouts of the per-position natural-log entropy, computed
    on renormalized top-k distributions. None when nothing is measurable."""
    per_rollout: list[float] = []
    for positions in rollouts:
        if not positions:
            continue
        per_rollout.append(
            sum(dist.entropy() for dist in positions) / len(positions)
        )
    if not per_rollout:
        return None
    return sum(per_rollout) / len(per_rollout)


REPORT_COLUMNS = [
    "iteration",
    "cross_iter_rep",
    "intra_iter_rep",
    "llm_rep_ratio",
    "llm_rep_coverage",
    "spread",
    "challenger_entropy",
    "generated",
    "valid",
    "replayed",
]


def _cell(value: Optional[float | int]) -> str:
    return "" if value is None else repr(value) if isinstance(value, float) else str(value)


def append_report_row(path: str, report: IterationReport) -> None:
    """Append one CSV row, writing the header on first use."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(REPORT_COLUMNS)
        writer.writerow(
            [
                _cell(getattr(report, col)) if col != "iteration" else str(report.iteration)
                for col in REPORT_COLUMNS
            ]
        )


def read_report(path: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def render_report(rows: list[dict[str, str]]) -> str:
    """Fixed-width trend table of the per-iteration diagnostics."""
    if not rows:
        return "(no iterations recorded)\n"
    headers = REPORT_COLUMNS
    display: list[list[str]] = [headers]
    for row in rows:
        rendered = []
        for col in headers:
            cell = row.get(col, "")
            if cell and col not in ("iteration", "generated", "valid", "replayed"):
                cell = f"{float(cell):.4f}"
            rendered.append(cell if cell else "-")
        display.append(rendered)
    widths = [max(len(r[i]) for r in display) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(display):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
