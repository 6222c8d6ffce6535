"""Skill-aware question representation.

Questions are abstracted into canonical solver programs by a coder backend
and embedded with a code encoder, so similarity reflects the reasoning
procedure rather than the narrative. Abstraction failures fall back to
embedding the raw question text (flagged, never dropped). Generated code is
treated purely as a representation and is never executed.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import prompts
from .backends import ChatBackend, DimensionDriftError, EmbeddingBackend, Role
from .core import Config, Embedding, Question

_CODE_OPEN = "<CODE>"
_CODE_CLOSE = "</CODE>"
_CACHE_KIND = "skill-cache"
_CACHE_VERSION = 1


class Provenance(str, Enum):
    ABSTRACTED = "abstracted"
    RAW_TEXT_FALLBACK = "raw_text_fallback"


@dataclass(frozen=True, slots=True)
class SkillResult:
    """Outcome of the abstraction pipeline for one question."""

    question_id: str
    code: Optional[str]
    embedding: Embedding
    provenance: Provenance

    def __post_init__(self) -> None:
        if (self.provenance is Provenance.ABSTRACTED) != (self.code is not None):
            raise ValueError("provenance must be 'abstracted' exactly when code is present")


def extract_code_block(completion: str) -> Optional[str]:
    """First <CODE>...</CODE> block, trimmed; None when absent or empty."""
    open_at = completion.find(_CODE_OPEN)
    if open_at < 0:
        return None
    close_at = completion.find(_CODE_CLOSE, open_at + len(_CODE_OPEN))
    if close_at < 0:
        return None
    code = completion[open_at + len(_CODE_OPEN) : close_at].strip()
    return code or None


def _text_key(text: str) -> str:
    return hashlib.sha256(text.strip().encode("utf-8")).hexdigest()


class SkillPipeline:
    """Caching front end over the coder and embedder backends.

    The question-level cache is an append-only JSONL log (hash, code,
    embedding) persisted alongside the bank so abstraction survives across
    iterations. Reads are lock-free; inserts are serialized.
    """

    def __init__(
        self,
        coder: ChatBackend,
        embedder: EmbeddingBackend,
        cfg: Config,
        cache_path: Optional[str] = None,
    ):
        if coder.spec.role != Role.CODER:
            raise ValueError("SkillPipeline needs a coder-role backend")
        if embedder.spec.role != Role.EMBEDDER:
            raise ValueError("SkillPipeline needs an embedder-role backend")
        self._coder = coder
        self._embedder = embedder
        self._cfg = cfg
        self._dim: Optional[int] = None
        self._lock = threading.Lock()
        self._text_memo: dict[str, Embedding] = {}
        self._question_cache: dict[str, tuple[Optional[str], Embedding]] = {}
        self._pending: list[tuple[str, Optional[str], Embedding]] = []
        self._cache_path = cache_path
        self.embedder_calls = 0
        self.coder_calls = 0
        if cache_path and os.path.exists(cache_path):
            self._load_cache(cache_path)

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    def _load_cache(self, path: str) -> None:
        with open(path, encoding="utf-8") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                return
            header = json.loads(header_line)
            if header.get("kind") != _CACHE_KIND or header.get("version") != _CACHE_VERSION:
                raise ValueError(f"unrecognized cache header in {path}")
            self._dim = int(header["dim"])
            for line in fh:
                if not line.strip():
                    continue
                entry = json.loads(line)
                # Stored values are exact f32; bypass re-normalization so a
                # reloaded cache reproduces byte-identical artifacts.
                emb = Embedding.from_normalized_f32(
                    np.asarray(entry["embedding"], dtype=np.float32)
                )
                self._question_cache[entry["hash"]] = (entry["code"], emb)

    def flush_cache(self) -> None:
        """Persist pending entries, sorted by key so concurrent pipelines
        produce byte-identical logs regardless of thread completion order."""
        if not self._cache_path:
            return
        with self._lock:
            pending = sorted(self._pending, key=lambda e: e[0])
            self._pending = []
        if not pending:
            return
        new_file = not os.path.exists(self._cache_path) or (
            os.path.getsize(self._cache_path) == 0
        )
        with open(self._cache_path, "a", encoding="utf-8") as fh:
            if new_file:
                header = {
                    "kind": _CACHE_KIND,
                    "version": _CACHE_VERSION,
                    "dim": pending[0][2].dim,
                }
                fh.write(json.dumps(header, sort_keys=True) + "\n")
            for key, code, embedding in pending:
                entry = {
                    "hash": key,
                    "code": code,
                    "embedding": [float(v) for v in embedding.values],
                }
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def embed_text(self, text: str) -> Embedding:
        """Unit-norm embedding of arbitrary text, memoized per exact text."""
        if not text:
            raise ValueError("cannot embed empty text")
        memo = self._text_memo.get(text)
        if memo is not None:
            return memo
        vectors = self._embedder.embed([text])
        self.embedder_calls += 1
        vec = np.asarray(vectors[0], dtype=np.float64)
        if self._dim is None:
            self._dim = int(vec.shape[0])
        elif int(vec.shape[0]) != self._dim:
            raise DimensionDriftError(
                f"embedder returned dim {vec.shape[0]}, run is pinned to {self._dim}"
            )
        emb = Embedding(vec)
        with self._lock:
            self._text_memo[text] = emb
        return emb

    def abstract_to_code(self, question: Question) -> Optional[str]:
        """Greedy coder pass; None when the reply has no usable code block.

        Transport failures propagate; a missing block is a soft fallback.
        """
        completions = self._coder.complete(
            prompts.code_generation_messages(question.text), n=1
        )
        self.coder_calls += 1
        if not completions:
            return None
        return extract_code_block(completions[0].text)

    def skill_embedding(self, question: Question) -> SkillResult:
        """Abstract-then-embed with raw-text fallback (the full pipeline).

        With use_abstraction disabled this is exactly embed_text(question.text).
        """
        if not self._cfg.use_abstraction:
            return SkillResult(
                question_id=question.id,
                code=None,
                embedding=self.embed_text(question.text),
                provenance=Provenance.RAW_TEXT_FALLBACK,
            )
        key = _text_key(question.text)
        cached = self._question_cache.get(key)
        if cached is not None:
            code, emb = cached
            return SkillResult(
                question_id=question.id,
                code=code,
                embedding=emb,
                provenance=Provenance.ABSTRACTED if code else Provenance.RAW_TEXT_FALLBACK,
            )
        code = self.abstract_to_code(question)
        emb = self.embed_text(code if code is not None else question.text)
        with self._lock:
            if key not in self._question_cache:
                self._question_cache[key] = (code, emb)
                self._pending.append((key, code, emb))
        return SkillResult(
            question_id=question.id,
            code=code,
            embedding=emb,
            provenance=Provenance.ABSTRACTED if code else Provenance.RAW_TEXT_FALLBACK,
        )
