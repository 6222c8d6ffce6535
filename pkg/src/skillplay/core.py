"""Domain types, run configuration, and answer canonicalization.

Everything here is an immutable value after construction and safe to share
across threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

# Key reserved for solver responses with no parseable answer. U+FFFF is a
# noncharacter, so these keys sort after every real canonical answer and can
# never collide with one.
UNPARSEABLE_KEY_PREFIX = "￿#"


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class QuestionSource(str, Enum):
    GENERATED = "generated"
    REPLAYED = "replayed"


@dataclass(frozen=True, slots=True)
class Question:
    """A generated problem statement plus lifecycle metadata."""

    id: str
    text: str
    iteration: int
    source: QuestionSource = QuestionSource.GENERATED

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("question text must be non-empty")
        if self.iteration < 0:
            raise ValueError("question iteration must be non-negative")


class Embedding:
    """Unit-norm dense vector in the skill space.

    Values are quantized to float32 at construction (the persistence format
    is f32, and keeping one canonical precision makes round-trips lossless).
    Similarity math should upcast to float64; see `as_float64`.
    """

    __slots__ = ("_values",)

    def __init__(self, values: Sequence[float] | np.ndarray):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding entries must be finite")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ValueError("embedding must not be the zero vector")
        out = (arr / norm).astype(np.float32)
        out.flags.writeable = False
        self._values = out

    @classmethod
    def from_normalized_f32(cls, arr: np.ndarray) -> "Embedding":
        """Wrap an already unit-norm float32 vector (persistence fast path)."""
        obj = object.__new__(cls)
        out = np.asarray(arr, dtype=np.float32).copy()
        if out.ndim != 1 or out.size == 0 or not np.all(np.isfinite(out)):
            raise ValueError("invalid stored embedding")
        n = float(np.linalg.norm(out.astype(np.float64)))
        if abs(n - 1.0) > 1e-5:
            raise ValueError(f"stored embedding norm {n} is not 1")
        out.flags.writeable = False
        obj._values = out
        return obj

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return int(self._values.shape[0])

    def as_float64(self) -> np.ndarray:
        return self._values.astype(np.float64)

    def dot(self, other: "Embedding") -> float:
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return float(np.dot(self.as_float64(), other.as_float64()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return np.array_equal(self._values, other._values)

    def __hash__(self) -> int:
        return hash(self._values.tobytes())

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim})"


def is_unparseable_key(key: str) -> bool:
    return key.startswith(UNPARSEABLE_KEY_PREFIX)


@dataclass(frozen=True, slots=True)
class AnswerGroupSet:
    """Partition of K solver answers into equivalence groups.

    `groups` is sorted by (count desc, canonical answer asc); unparseable
    responses appear as singleton groups under reserved keys that sort last.
    """

    groups: tuple[tuple[str, int], ...]
    total: int

    def __post_init__(self) -> None:
        if self.total < 1:
            raise ValueError("total must be >= 1")
        if sum(c for _, c in self.groups) != self.total:
            raise ValueError("group counts must sum to total")
        keys = [k for k, _ in self.groups]
        if len(set(keys)) != len(keys):
            raise ValueError("canonical answers must be pairwise distinct")
        expected = sorted(self.groups, key=lambda g: (-g[1], g[0]))
        if list(self.groups) != expected:
            raise ValueError("groups must be sorted by (count desc, answer asc)")

    @property
    def largest_count(self) -> int:
        return self.groups[0][1] if self.groups else 0


@dataclass(frozen=True, slots=True)
class RewardBreakdown:
    """Per-question decomposition of the question-generator reward."""

    uncertainty: float
    p_rep: float
    p_max: float
    p_mean: float
    p_map: float
    total: float

    def recompute_total(self, cfg: "Config") -> float:
        return self.uncertainty - cfg.alpha * self.p_rep - cfg.beta * self.p_map

    def check(self, cfg: "Config", tol: float = 1e-9) -> None:
        if abs(self.total - self.recompute_total(cfg)) > tol:
            raise ValueError("total does not recompose from components")


class SimilarityMode(str, Enum):
    SAM = "sam"
    BLEU = "bleu"


@dataclass(frozen=True, slots=True)
class Config:
    """Run configuration. Defaults are the reference hyperparameters."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    tau_max: float = 0.5
    tau_mean: float = 0.25
    rho: float = 0.3
    valid_lo: float = 0.3
    valid_hi: float = 0.8
    solver_samples: int = 10
    cluster_threshold: float = 0.5
    similarity_mode: SimilarityMode = SimilarityMode.SAM
    use_map: bool = True
    use_max_term: bool = True
    use_mean_term: bool = True
    use_replay: bool = True
    use_abstraction: bool = True
    use_embedding_similarity: bool = True

    def __post_init__(self) -> None:
        _check_range("alpha", self.alpha, 0.0, math.inf)
        _check_range("beta", self.beta, 0.0, math.inf)
        _check_range("gamma", self.gamma, 0.0, 1.0)
        _check_range("tau_max", self.tau_max, 0.0, 1.0)
        _check_range("tau_mean", self.tau_mean, 0.0, 1.0)
        _check_range("rho", self.rho, 0.0, 1.0, hi_open=True)
        _check_range("valid_lo", self.valid_lo, 0.0, 1.0)
        _check_range("valid_hi", self.valid_hi, 0.0, 1.0)
        _check_range("cluster_threshold", self.cluster_threshold, 0.0, 1.0)
        if self.valid_lo > self.valid_hi:
            raise ConfigError(
                f"valid_lo ({self.valid_lo}) must not exceed valid_hi ({self.valid_hi})"
            )
        if self.solver_samples < 1:
            raise ConfigError("solver_samples must be a positive integer")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else v
        return out


def _check_range(
    name: str, value: float, lo: float, hi: float, hi_open: bool = False
) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{name} must be finite")
    bad = value < lo or (value >= hi if hi_open else value > hi)
    if bad:
        hi_txt = f"{hi})" if hi_open else f"{hi}]"
        raise ConfigError(f"{name} out of [{lo}, {hi_txt}: got {value}")


_BOOL_KEYS = frozenset(
    {
        "use_map",
        "use_max_term",
        "use_mean_term",
        "use_replay",
        "use_abstraction",
        "use_embedding_similarity",
    }
)
_FLOAT_KEYS = frozenset(
    {
        "alpha",
        "beta",
        "gamma",
        "tau_max",
        "tau_mean",
        "rho",
        "valid_lo",
        "valid_hi",
        "cluster_threshold",
    }
)


def validate_config(raw: Mapping[str, Any]) -> Config:
    """Build a Config from a flat key-value mapping.

    Absent keys take the reference defaults; unknown keys and out-of-range
    values are rejected with the offending key named.
    """
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _BOOL_KEYS:
            kwargs[key] = _coerce_bool(key, value)
        elif key in _FLOAT_KEYS:
            kwargs[key] = _coerce_float(key, value)
        elif key == "solver_samples":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"solver_samples must be an integer, got {value!r}")
            kwargs[key] = value
        elif key == "similarity_mode":
            try:
                kwargs[key] = SimilarityMode(str(value).lower())
            except ValueError:
                raise ConfigError(
                    f"similarity_mode must be one of 'sam', 'bleu': got {value!r}"
                ) from None
    return Config(**kwargs)


def _coerce_bool(key: str, value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
    raise ConfigError(f"{key} must be a boolean, got {value!r}")


def _coerce_float(key: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    raise ConfigError(f"{key} must be a number, got {value!r}")


_WS_RE = re.compile(r"\s+")
_FRACTION_WS_RE = re.compile(r"\s*/\s*")


def normalize_answer(raw: str) -> str:
    """Deterministic canonical form for extracted final answers.

    Trims and collapses whitespace, strips surrounding dollar signs,
    removes spaces around "/" in fractions, and lowercases. Idempotent.
    """
    s = _WS_RE.sub(" ", raw.strip())
    while True:
        stripped = s.strip().strip("$").strip()
        if stripped == s:
            break
        s = stripped
    s = _FRACTION_WS_RE.sub("/", s)
    return s.lower()


def answers_equivalent(a: str, b: str) -> bool:
    """Answer equivalence: exact match of canonical forms.

    Kept as a seam so a symbolic checker can be swapped in later.
    """
    return normalize_answer(a) == normalize_answer(b)
