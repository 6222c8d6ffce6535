"""Uncertainty-based question reward, pseudo-labels, and the validity filter.

All functions are pure; a batch can be scored in parallel.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import (
    UNPARSEABLE_KEY_PREFIX,
    AnswerGroupSet,
    Config,
    is_unparseable_key,
    normalize_answer,
)

_BOXED = "\\boxed{"


@dataclass(frozen=True, slots=True)
class SolverRollout:
    """K solver responses for one question, with per-response extractions."""

    question_id: str
    responses: tuple[str, ...]
    extracted: tuple[Optional[str], ...]

    def __post_init__(self) -> None:
        if len(self.responses) < 1:
            raise ValueError("rollout needs at least one response")
        if len(self.extracted) != len(self.responses):
            raise ValueError("one extraction slot per response required")

    @property
    def k(self) -> int:
        return len(self.responses)

    @classmethod
    def from_responses(
        cls, question_id: str, responses: Sequence[str]
    ) -> "SolverRollout":
        return cls(
            question_id=question_id,
            responses=tuple(responses),
            extracted=tuple(extract_answer(r) for r in responses),
        )


def extract_answer(solution: str) -> Optional[str]:
    """Canonical content of the last balanced \\boxed{...} in a solution.

    Returns None when no box exists or the braces after the last box never
    balance (treated as unparseable, not an error).
    """
    start = solution.rfind(_BOXED)
    if start < 0:
        return None
    i = start + len(_BOXED)
    depth = 1
    out: list[str] = []
    while i < len(solution):
        ch = solution[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return normalize_answer("".join(out))
        out.append(ch)
        i += 1
    return None


def group_answers(rollout: SolverRollout) -> AnswerGroupSet:
    """Partition extracted answers into equality groups.

    Each unparseable response forms its own singleton group under a reserved
    key, so failures never vote together.
    """
    counts: Counter[str] = Counter()
    unparseable = 0
    for ans in rollout.extracted:
        if ans is None:
            counts[f"{UNPARSEABLE_KEY_PREFIX}{unparseable}"] = 1
            unparseable += 1
        else:
            counts[ans] += 1
    groups = tuple(sorted(counts.items(), key=lambda g: (-g[1], g[0])))
    return AnswerGroupSet(groups=groups, total=rollout.k)


def consistency_score(groups: AnswerGroupSet) -> float:
    """Largest group size over K; lands in [1/K, 1]."""
    return groups.largest_count / groups.total


def uncertainty_reward(s: float) -> float:
    """min(s, 1-s): zero at unanimity, peak 0.5 at the capability boundary."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"consistency score must be in [0, 1], got {s}")
    return min(s, 1.0 - s)


def pseudo_label(groups: AnswerGroupSet) -> Optional[str]:
    """Majority-vote answer; ties break to the lexicographically smallest.

    None when the winning group is an unparseable singleton class.
    """
    if not groups.groups:
        return None
    key, _ = groups.groups[0]
    return None if is_unparseable_key(key) else key


def solver_reward(answer: Optional[str], label: str) -> int:
    """Binary training signal: 1 iff the answer matches the pseudo-label."""
    if answer is None:
        return 0
    return int(normalize_answer(answer) == normalize_answer(label))


def is_valid(s: float, cfg: Config) -> bool:
    """Uncertainty filter: keep questions with validity-band consistency."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"consistency score must be in [0, 1], got {s}")
    return cfg.valid_lo <= s <= cfg.valid_hi
