"""Uniform client contract for the five model-service roles.

A suite bundles challenger, solver, coder, embedder, and judge behind one
chat/embedding interface. The HTTP implementation speaks the de-facto open
chat-completion and embeddings wire protocol (see docs/wire_protocol.md);
the deterministic mock implementation lives in `skillplay.mock`.
"""

from __future__ import annotations

import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import requests

from . import prompts
from .core import Question
from .reward import SolverRollout

ENV_PREFIX = "SKILLPLAY"


class BackendError(Exception):
    """Base class for backend failures."""


class RoleMismatchError(BackendError):
    """An operation was invoked against a spec of the wrong role."""


class TransportError(BackendError):
    """All retry attempts failed; carries the per-attempt error trace."""

    def __init__(self, message: str, attempts: list[str]):
        super().__init__(message)
        self.attempts = attempts


class DimensionDriftError(BackendError):
    """The embedder changed output dimension mid-run."""


class Role(str, Enum):
    CHALLENGER = "challenger"
    SOLVER = "solver"
    CODER = "coder"
    EMBEDDER = "embedder"
    JUDGE = "judge"


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    attempts: int = 3
    backoff: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("retry attempts must be >= 1")

    def delay(self, attempt: int) -> float:
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt, len(self.backoff) - 1)]


# Reference sampling settings per role: generator roles sample at
# temperature 1.0 / top_p 0.99, the coder is greedy for canonicalization,
# and the judge is greedy for stable verdicts.
_ROLE_TEMPERATURE = {
    Role.CHALLENGER: 1.0,
    Role.SOLVER: 1.0,
    Role.CODER: 0.0,
    Role.EMBEDDER: 0.0,
    Role.JUDGE: 0.0,
}
_ROLE_TOP_P = {
    Role.CHALLENGER: 0.99,
    Role.SOLVER: 0.99,
    Role.CODER: 1.0,
    Role.EMBEDDER: 1.0,
    Role.JUDGE: 1.0,
}
DEFAULT_MODEL_NAMES = {
    Role.CODER: "Qwen2.5-Coder-7B",
    Role.EMBEDDER: "Jina-Code-Embeddings-1.5B",
}


@dataclass(frozen=True, slots=True)
class BackendSpec:
    """Connection and sampling settings for one model role."""

    role: Role
    kind: str  # "http" | "mock"
    model_name: str = ""
    endpoint: Optional[str] = None
    temperature: Optional[float] = None
    top_p: Optional[float] = None
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    logprob_top_k: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ValueError(f"backend kind must be 'http' or 'mock', got {self.kind!r}")
        if self.kind == "http":
            if not self.endpoint:
                raise ValueError(f"http backend for {self.role.value} needs an endpoint")
            if not self.model_name:
                raise ValueError(f"http backend for {self.role.value} needs a model name")
        if self.kind == "mock" and self.seed is None:
            raise ValueError(f"mock backend for {self.role.value} needs a seed")
        if self.temperature is not None and self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.logprob_top_k is not None and self.logprob_top_k < 1:
            raise ValueError("logprob_top_k must be >= 1")

    @property
    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return _ROLE_TEMPERATURE[self.role]

    @property
    def effective_top_p(self) -> float:
        if self.top_p is not None:
            return self.top_p
        return _ROLE_TOP_P[self.role]


@dataclass(frozen=True, slots=True)
class TokenDistribution:
    """Top-k next-token probabilities at one position."""

    entries: tuple[tuple[str, float], ...]
    renormalized: bool = False

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("distribution must have at least one entry")
        total = 0.0
        for _, p in self.entries:
            if p <= 0:
                raise ValueError("probabilities must be positive")
            total += p
        if total > 1.0 + 1e-6 and not self.renormalized:
            raise ValueError(f"probabilities sum to {total} > 1 before renormalization")

    def renormalize(self) -> "TokenDistribution":
        total = sum(p for _, p in self.entries)
        return TokenDistribution(
            entries=tuple((t, p / total) for t, p in self.entries),
            renormalized=True,
        )

    def entropy(self) -> float:
        """Natural-log entropy of the renormalized distribution."""
        dist = self if self.renormalized else self.renormalize()
        return -sum(p * math.log(p) for _, p in dist.entries)


@dataclass(frozen=True, slots=True)
class Completion:
    text: str
    token_distributions: Optional[tuple[TokenDistribution, ...]] = None


class ChatBackend(Protocol):
    spec: BackendSpec

    def complete(
        self,
        messages: list[dict[str, str]],
        n: int = 1,
        seed: Optional[int] = None,
        want_logprobs: bool = False,
    ) -> list[Completion]: ...


class EmbeddingBackend(Protocol):
    spec: BackendSpec

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class Transport(Protocol):
    def post(self, url: str, payload: dict) -> dict: ...


class HttpTransport:
    """Single-attempt JSON POST; retry policy lives in the backend."""

    def __init__(self, api_key: Optional[str] = None, timeout: float = 120.0):
        self._session = requests.Session()
        self._api_key = api_key
        self._timeout = timeout

    def post(self, url: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        resp = self._session.post(url, json=payload, headers=headers, timeout=self._timeout)
        if resp.status_code != 200:
            raise IOError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()


class RecordingTransport:
    """Wraps a transport and appends successful (request, response) pairs to
    a JSONL log for offline deterministic replays."""

    def __init__(self, inner: Transport, log_path: str):
        import json

        self._inner = inner
        self._path = log_path
        self._json = json

    def post(self, url: str, payload: dict) -> dict:
        response = self._inner.post(url, payload)
        line = self._json.dumps(
            {"url": url, "payload": payload, "response": response}, sort_keys=True
        )
        with open(self._path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        return response


class ReplayTransport:
    """Serves responses from a recorded log, verifying each request matches."""

    def __init__(self, log_path: str):
        import json

        self._entries: list[dict] = []
        with open(log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._entries.append(json.loads(line))
        self._cursor = 0

    def post(self, url: str, payload: dict) -> dict:
        if self._cursor >= len(self._entries):
            raise IOError("replay log exhausted")
        entry = self._entries[self._cursor]
        if entry["url"] != url or entry["payload"] != payload:
            raise IOError(
                f"replay mismatch at entry {self._cursor}: url or payload differs"
            )
        self._cursor += 1
        return entry["response"]


def _run_with_retries(
    spec: BackendSpec,
    call: Callable[[], dict],
    sleep: Callable[[float], None],
) -> dict:
    trace: list[str] = []
    for attempt in range(spec.retry.attempts):
        try:
            return call()
        except Exception as exc:  # noqa: BLE001 - every transport error retries
            trace.append(f"attempt {attempt + 1}: {exc}")
            if attempt + 1 < spec.retry.attempts:
                sleep(spec.retry.delay(attempt))
    raise TransportError(
        f"{spec.role.value} backend failed after {spec.retry.attempts} attempts",
        attempts=trace,
    )


class HttpChatBackend:
    def __init__(
        self,
        spec: BackendSpec,
        transport: Optional[Transport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if spec.kind != "http":
            raise ValueError("HttpChatBackend requires an http spec")
        self.spec = spec
        self._transport = transport or HttpTransport(api_key=resolve_api_key(spec.role))
        self._sleep = sleep
        self._gate = threading.Semaphore(spec.max_in_flight)

    def complete(
        self,
        messages: list[dict[str, str]],
        n: int = 1,
        seed: Optional[int] = None,
        want_logprobs: bool = False,
    ) -> list[Completion]:
        payload: dict = {
            "model": self.spec.model_name,
            "messages": messages,
            "temperature": self.spec.effective_temperature,
            "top_p": self.spec.effective_top_p,
            "n": n,
        }
        if seed is not None:
            payload["seed"] = seed
        if want_logprobs and self.spec.logprob_top_k:
            payload["logprobs"] = True
            payload["top_logprobs"] = self.spec.logprob_top_k
        url = self.spec.endpoint.rstrip("/") + "/chat/completions"
        with self._gate:
            data = _run_with_retries(
                self.spec, lambda: self._transport.post(url, payload), self._sleep
            )
        return [_parse_choice(choice) for choice in data.get("choices", [])]


def _parse_choice(choice: dict) -> Completion:
    text = choice.get("message", {}).get("content") or ""
    distributions: Optional[tuple[TokenDistribution, ...]] = None
    logprobs = choice.get("logprobs")
    if logprobs and logprobs.get("content"):
        positions = []
        for entry in logprobs["content"]:
            tops = entry.get("top_logprobs") or []
            pairs = tuple(
                (t["token"], math.exp(t["logprob"])) for t in tops if "logprob" in t
            )
            if pairs:
                positions.append(TokenDistribution(entries=pairs))
        if positions:
            distributions = tuple(positions)
    return Completion(text=text, token_distributions=distributions)


class HttpEmbeddingBackend:
    def __init__(
        self,
        spec: BackendSpec,
        transport: Optional[Transport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if spec.kind != "http":
            raise ValueError("HttpEmbeddingBackend requires an http spec")
        self.spec = spec
        self._transport = transport or HttpTransport(api_key=resolve_api_key(spec.role))
        self._sleep = sleep
        self._gate = threading.Semaphore(spec.max_in_flight)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        payload = {"model": self.spec.model_name, "input": list(texts)}
        url = self.spec.endpoint.rstrip("/") + "/embeddings"
        with self._gate:
            data = _run_with_retries(
                self.spec, lambda: self._transport.post(url, payload), self._sleep
            )
        rows = sorted(data.get("data", []), key=lambda r: r.get("index", 0))
        return [np.asarray(r["embedding"], dtype=np.float64) for r in rows]


def resolve_endpoint(role: Role) -> Optional[str]:
    return os.environ.get(f"{ENV_PREFIX}_{role.value.upper()}_ENDPOINT") or os.environ.get(
        f"{ENV_PREFIX}_ENDPOINT"
    )


def resolve_api_key(role: Role) -> Optional[str]:
    return os.environ.get(f"{ENV_PREFIX}_{role.value.upper()}_API_KEY") or os.environ.get(
        f"{ENV_PREFIX}_API_KEY"
    )


@dataclass
class BackendSuite:
    """The five model roles behind one client contract."""

    challenger: ChatBackend
    solver: ChatBackend
    coder: ChatBackend
    embedder: EmbeddingBackend
    judge: ChatBackend

    def __post_init__(self) -> None:
        expected = {
            "challenger": Role.CHALLENGER,
            "solver": Role.SOLVER,
            "coder": Role.CODER,
            "embedder": Role.EMBEDDER,
            "judge": Role.JUDGE,
        }
        for slot, role in expected.items():
            spec = getattr(self, slot).spec
            if spec.role != role:
                raise RoleMismatchError(
                    f"suite slot {slot!r} holds a {spec.role.value} spec"
                )

    def observe_bank(self, bank, cfg) -> None:
        """Hook for backends that adapt to run state (mock challenger)."""
        for slot in ("challenger", "solver", "coder", "embedder", "judge"):
            backend = getattr(self, slot)
            hook = getattr(backend, "observe_bank", None)
            if hook is not None:
                hook(bank, cfg)


def _require_role(backend: ChatBackend | EmbeddingBackend, role: Role) -> None:
    if backend.spec.role != role:
        raise RoleMismatchError(
            f"expected a {role.value} backend, got {backend.spec.role.value}"
        )


@dataclass(frozen=True, slots=True)
class GeneratedQuestion:
    """One challenger completion, parsed. Malformed completions are kept and
    flagged rather than dropped so validity rates stay observable."""

    raw: str
    text: Optional[str]
    claimed_answer: Optional[str]
    well_formed: bool
    token_distributions: Optional[tuple[TokenDistribution, ...]] = None


_QUESTION_OPEN = "<question>"
_QUESTION_CLOSE = "</question>"


def _extract_boxed_raw(text: str) -> Optional[str]:
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    out: list[str] = []
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return "".join(out).strip()
        out.append(ch)
        i += 1
    return None


def parse_challenger_completion(completion: Completion) -> GeneratedQuestion:
    raw = completion.text
    open_at = raw.find(_QUESTION_OPEN)
    close_at = raw.find(_QUESTION_CLOSE)
    text: Optional[str] = None
    claimed: Optional[str] = None
    well_formed = False
    if open_at >= 0 and close_at > open_at:
        text = raw[open_at + len(_QUESTION_OPEN) : close_at].strip()
        claimed = _extract_boxed_raw(raw[close_at + len(_QUESTION_CLOSE) :])
        well_formed = bool(text) and claimed is not None
    elif open_at >= 0:
        # Missing close tag: recover what we can for best-effort scoring.
        text = raw[open_at + len(_QUESTION_OPEN) :].strip() or None
    else:
        text = raw.strip() or None
    return GeneratedQuestion(
        raw=raw,
        text=text,
        claimed_answer=claimed,
        well_formed=well_formed,
        token_distributions=completion.token_distributions,
    )


def generate_questions(
    backend: ChatBackend, n: int, seed: int
) -> list[GeneratedQuestion]:
    """Sample n challenger completions and parse the mandated format."""
    _require_role(backend, Role.CHALLENGER)
    if n < 1:
        raise ValueError("n must be >= 1")
    completions = backend.complete(
        prompts.challenger_messages(),
        n=n,
        seed=seed,
        want_logprobs=backend.spec.logprob_top_k is not None,
    )
    return [parse_challenger_completion(c) for c in completions]


def solve(backend: ChatBackend, question: Question, k: int, seed: int) -> SolverRollout:
    """Sample K solver responses for one question."""
    _require_role(backend, Role.SOLVER)
    if k < 1:
        raise ValueError("K must be >= 1")
    completions = backend.complete(
        prompts.solver_messages(question.text), n=k, seed=seed
    )
    return SolverRollout.from_responses(question.id, [c.text for c in completions])


class DuplicateVerdict(str, Enum):
    NOVEL = "novel"
    DUPLICATE = "duplicate"


_TOKEN_RE = re.compile(r"[A-Za-z]+")


def parse_judge_reply(reply: str) -> DuplicateVerdict:
    """Last alphabetic token decides; anything unparseable leans DUPLICATE."""
    tokens = _TOKEN_RE.findall(reply)
    if tokens and tokens[-1].upper() == "NOVEL":
        return DuplicateVerdict.NOVEL
    return DuplicateVerdict.DUPLICATE


def judge_duplicate(
    backend: ChatBackend, new_q: Question, refs: Sequence[Question]
) -> DuplicateVerdict:
    """Ask the judge whether new_q duplicates any of its nearest neighbors."""
    _require_role(backend, Role.JUDGE)
    if not refs:
        raise ValueError("at least one reference question is required")
    completions = backend.complete(
        prompts.repetition_judge_messages(new_q.text, [r.text for r in refs]), n=1
    )
    reply = completions[0].text if completions else ""
    return parse_judge_reply(reply)


def check_answer(backend: ChatBackend, answer: str, reference: str) -> bool:
    """Yes/No answer equivalence check; unparseable replies count as No."""
    _require_role(backend, Role.JUDGE)
    completions = backend.complete(prompts.answer_check_messages(answer, reference), n=1)
    reply = completions[0].text if completions else ""
    tokens = _TOKEN_RE.findall(reply)
    return bool(tokens) and tokens[-1].lower() == "yes"
