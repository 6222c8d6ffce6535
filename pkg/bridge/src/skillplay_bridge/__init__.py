"""In-process bindings for external RL trainer loops.

A session holds a loaded config and memory bank; `score_batch` and
`replay_sample` delegate to the primary library's single scoring and
sampling paths, so no formula exists twice and results are identical to
the harness and CLI outputs on the same inputs. The API is deliberately
minimal and functional: open_session, score_batch, replay_sample, close.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Union

import yaml

import skillplay
from skillplay.core import Config, Embedding, RewardBreakdown, SimilarityMode, validate_config
from skillplay.harness import score_embedded_batch
from skillplay.memory import MemoryBank, load_bank, sample_replay

__version__ = skillplay.__version__

__all__ = [
    "BridgeError",
    "BridgeSession",
    "open_session",
    "score_batch",
    "replay_sample",
    "close",
]


class BridgeError(RuntimeError):
    """Session misuse or input mismatch."""


@dataclass
class BridgeSession:
    """One loaded config + optional memory bank. Single-threaded from the
    caller's perspective; concurrent sessions may share a read-only bank
    file (each loads its own copy)."""

    config: Config
    bank: Optional[MemoryBank]
    version: str = field(default=__version__)
    _closed: bool = field(default=False, repr=False)

    def _check_open(self) -> None:
        if self._closed:
            raise BridgeError("session is closed")


def open_session(
    config: Union[None, str, os.PathLike, Mapping[str, Any], Config] = None,
    bank: Union[None, str, os.PathLike, MemoryBank] = None,
) -> BridgeSession:
    """Load a session from a config (path, mapping, or Config) and an
    optional bank (path or loaded MemoryBank)."""
    if config is None:
        cfg = validate_config({})
    elif isinstance(config, Config):
        cfg = config
    elif isinstance(config, Mapping):
        cfg = validate_config(config)
    else:
        with open(os.fspath(config), encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise BridgeError("config file must be a flat key-value mapping")
        cfg = validate_config(raw)

    loaded_bank: Optional[MemoryBank]
    if bank is None:
        loaded_bank = None
    elif isinstance(bank, MemoryBank):
        loaded_bank = bank
    else:
        loaded_bank = load_bank(bank)
    return BridgeSession(config=cfg, bank=loaded_bank)


def _needs_embeddings(cfg: Config, bank: Optional[MemoryBank]) -> bool:
    if cfg.similarity_mode is SimilarityMode.SAM and cfg.use_embedding_similarity:
        return True
    return bank is not None and len(bank) > 0


def score_batch(
    session: BridgeSession,
    questions: Sequence[Mapping[str, Any]],
    batch_meta: Mapping[str, Any],
) -> list[RewardBreakdown]:
    """Score one batch exactly as the primary harness would.

    Each question is a mapping with `text` and an `embedding` (float list)
    or `code` string; `batch_meta["consistencies"]` supplies the solver
    consistency score per question (the trainer computes these from its own
    rollouts). Results are numerically identical to the primary scoring
    path because they are the primary scoring path.
    """
    session._check_open()
    cfg = session.config
    if session.bank is None and cfg.use_map:
        raise BridgeError("bank required: the history penalty is enabled")
    if not questions:
        return []
    consistencies = batch_meta.get("consistencies")
    if consistencies is None or len(consistencies) != len(questions):
        raise BridgeError("batch_meta['consistencies'] must supply one value per question")

    texts: list[str] = []
    codes: list[Optional[str]] = []
    embeddings: list[Embedding] = []
    needs = _needs_embeddings(cfg, session.bank)
    for i, item in enumerate(questions):
        if "text" not in item or not item["text"]:
            raise BridgeError(f"question {i} has no text")
        texts.append(item["text"])
        codes.append(item.get("code"))
        raw_embedding = item.get("embedding")
        if raw_embedding is not None:
            emb = Embedding(raw_embedding)
            if session.bank is not None and emb.dim != session.bank.dim:
                raise BridgeError(
                    f"question {i}: embedding dim {emb.dim} does not match "
                    f"bank dim {session.bank.dim}"
                )
            embeddings.append(emb)
        elif needs:
            raise BridgeError(
                f"question {i} has no embedding; this config scores on "
                "embeddings and a bridge session has no model backends"
            )
        else:
            # Placeholder, provably unread: lexical distance mode with an
            # empty or absent bank never consults embeddings.
            embeddings.append(Embedding([1.0]))

    breakdowns, _ = score_embedded_batch(
        cfg, session.bank, texts, embeddings, codes, [float(c) for c in consistencies]
    )
    return breakdowns


def replay_sample(
    session: BridgeSession, n_current: int, seed: int
) -> list[tuple[str, str]]:
    """Draw the experience-replay sample as (question text, label) pairs."""
    session._check_open()
    if session.bank is None:
        raise BridgeError("bank required: replay samples from history")
    records = sample_replay(session.bank, n_current, session.config, seed)
    return [(r.question.text, r.pseudo_label) for r in records]


def close(session: BridgeSession) -> None:
    session._closed = True
    session.bank = None
