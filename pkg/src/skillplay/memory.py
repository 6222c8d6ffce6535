"""Persistent cross-iteration question memory.

The bank is an append-only store of validity-filtered (question, embedding,
pseudo-label) tuples. It answers max/mean cosine queries for the history
penalty, samples experience replay for solver training sets, and round-trips
losslessly through a checksummed binary file.
"""

from __future__ import annotations

import os
import random
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Config, Embedding, Question, QuestionSource
from .reward import is_valid

BANK_MAGIC = b"RDMB"
BANK_VERSION = 1


class BankLoadError(Exception):
    """Base class for bank deserialization failures."""


class BankFormatError(BankLoadError):
    """Wrong magic bytes or structurally malformed content."""


class BankVersionError(BankLoadError):
    """Format version not supported by this library."""


class BankTruncatedError(BankLoadError):
    """File ends before the declared payload does."""


class BankChecksumError(BankLoadError):
    """Payload CRC32 does not match the stored checksum."""


@dataclass(frozen=True, slots=True)
class MemoryRecord:
    """One stored question with its skill embedding and training label."""

    question: Question
    embedding: Embedding
    pseudo_label: Optional[str]
    consistency: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.consistency <= 1.0:
            raise ValueError("consistency must be in [0, 1]")


class MemoryBank:
    """Append-only record store over all past iterations.

    Single writer at the iteration boundary; concurrent readers are safe
    because appends are batch-atomic (the record list is extended once).
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("bank dimension must be positive")
        self._dim = dim
        self._records: list[MemoryRecord] = []
        self._watermark = 0
        # Row buffer for similarity scans, grown amortized-O(1) per append.
        self._buf = np.zeros((0, dim))
        self._buf_rows = 0

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def iteration_watermark(self) -> int:
        return self._watermark

    @property
    def records(self) -> tuple[MemoryRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def _stacked(self) -> np.ndarray:
        n = len(self._records)
        if self._buf_rows > n:  # rollback shrank the record list
            self._buf_rows = 0
        if self._buf_rows < n:
            if self._buf.shape[0] < n:
                capacity = max(16, 2 * n)
                grown = np.zeros((capacity, self._dim))
                grown[: self._buf_rows] = self._buf[: self._buf_rows]
                self._buf = grown
            for i in range(self._buf_rows, n):
                self._buf[i] = self._records[i].embedding.as_float64()
            self._buf_rows = n
        return self._buf[:n]

    def ingest(
        self,
        iteration: int,
        batch: Sequence[tuple[Question, Embedding, float, Optional[str]]],
        cfg: Config,
    ) -> "MemoryBank":
        """Append the validity-filtered items of one iteration's batch.

        The watermark advances even when nothing passes the filter, which is
        what prevents double-ingesting an iteration after a resume.
        """
        if iteration <= self._watermark:
            raise ValueError(
                f"iteration {iteration} already ingested (watermark {self._watermark})"
            )
        accepted: list[MemoryRecord] = []
        for question, embedding, consistency, label in batch:
            if question.iteration != iteration:
                raise ValueError(
                    f"batch item from iteration {question.iteration}, expected {iteration}"
                )
            if embedding.dim != self._dim:
                raise ValueError(
                    f"embedding dim {embedding.dim} does not match bank dim {self._dim}"
                )
            if is_valid(consistency, cfg):
                accepted.append(
                    MemoryRecord(
                        question=question,
                        embedding=embedding,
                        pseudo_label=label,
                        consistency=consistency,
                    )
                )
        self._records.extend(accepted)
        self._watermark = iteration
        return self

    def rollback_to(self, iteration: int) -> None:
        """Drop records from iterations after `iteration` (crash recovery).

        Records are append-ordered by iteration, so a partially committed
        iteration is always a droppable suffix.
        """
        self._records = [r for r in self._records if r.question.iteration <= iteration]
        self._watermark = min(self._watermark, iteration)
        self._buf_rows = 0


def update_bank(
    bank: MemoryBank,
    iteration: int,
    batch: Sequence[tuple[Question, Embedding, float, Optional[str]]],
    cfg: Config,
) -> MemoryBank:
    """Functional alias for MemoryBank.ingest."""
    return bank.ingest(iteration, batch, cfg)


def max_similarity(bank: MemoryBank, e: Embedding) -> float:
    """Largest cosine between the query and any stored record.

    An empty bank reports -1 so the downstream hinge penalty is exactly 0
    on the cold start. Results clamp to [-1, 1]: float32 storage lets a
    self-similarity overshoot 1 by ~1e-7.
    """
    if e.dim != bank.dim:
        raise ValueError(f"embedding dim {e.dim} does not match bank dim {bank.dim}")
    if len(bank) == 0:
        return -1.0
    sims = bank._stacked() @ e.as_float64()
    return float(min(1.0, max(-1.0, sims.max())))


def mean_similarity(bank: MemoryBank, e: Embedding) -> float:
    """Mean cosine between the query and the whole bank (-1 when empty)."""
    if e.dim != bank.dim:
        raise ValueError(f"embedding dim {e.dim} does not match bank dim {bank.dim}")
    if len(bank) == 0:
        return -1.0
    sims = bank._stacked() @ e.as_float64()
    return float(min(1.0, max(-1.0, sims.mean())))


def map_penalty(p_max: float, p_mean: float, cfg: Config) -> float:
    """Hinged mix of max- and mean-similarity excesses over their thresholds.

    gamma * [p_max - tau_max]+ + (1 - gamma) * [p_mean - tau_mean]+, with the
    ablation switches zeroing individual terms or the whole penalty.
    """
    if not -1.0 <= p_max <= 1.0 or not -1.0 <= p_mean <= 1.0:
        raise ValueError("similarities must lie in [-1, 1]")
    if not cfg.use_map:
        return 0.0
    max_term = max(0.0, p_max - cfg.tau_max) if cfg.use_max_term else 0.0
    mean_term = max(0.0, p_mean - cfg.tau_mean) if cfg.use_mean_term else 0.0
    return cfg.gamma * max_term + (1.0 - cfg.gamma) * mean_term


def replay_count(n_current: int, rho: float) -> int:
    """Number of historical records m so that m/(m + n_current) ~= rho."""
    if n_current < 0:
        raise ValueError("n_current must be non-negative")
    if rho <= 0.0:
        return 0
    return int(rho * n_current / (1.0 - rho) + 0.5)


def sample_replay(
    bank: MemoryBank, n_current: int, cfg: Config, seed: int
) -> list[MemoryRecord]:
    """Uniform without-replacement sample of labeled historical records.

    Draws m = round(rho * n_current / (1 - rho)) records, clamped to the
    eligible (labeled) population; returns them in bank order. Deterministic
    for a given seed.
    """
    if not cfg.use_replay:
        return []
    m = replay_count(n_current, cfg.rho)
    if m == 0:
        return []
    eligible = [i for i, r in enumerate(bank.records) if r.pseudo_label is not None]
    if len(eligible) <= m:
        picked = eligible
    else:
        picked = sorted(random.Random(seed).sample(eligible, m))
    records = bank.records
    return [records[i] for i in picked]


def _pack_str(s: str) -> bytes:
    data = s.encode("utf-8")
    return struct.pack("<I", len(data)) + data


def _read_exact(buf: memoryview, offset: int, size: int) -> tuple[memoryview, int]:
    if offset + size > len(buf):
        raise BankTruncatedError(
            f"need {size} bytes at offset {offset}, file has {len(buf)}"
        )
    return buf[offset : offset + size], offset + size


def _unpack_str(buf: memoryview, offset: int) -> tuple[str, int]:
    raw, offset = _read_exact(buf, offset, 4)
    (length,) = struct.unpack("<I", raw)
    raw, offset = _read_exact(buf, offset, length)
    try:
        return bytes(raw).decode("utf-8"), offset
    except UnicodeDecodeError as exc:
        raise BankFormatError(f"invalid UTF-8 in record string: {exc}") from exc


def save_bank(bank: MemoryBank, path: str | os.PathLike[str]) -> None:
    """Write the bank atomically: header, records, trailing payload CRC32."""
    parts: list[bytes] = []
    for r in bank.records:
        parts.append(_pack_str(r.question.id))
        parts.append(struct.pack("<I", r.question.iteration))
        parts.append(_pack_str(r.question.text))
        if r.pseudo_label is None:
            parts.append(struct.pack("<B", 0))
        else:
            parts.append(struct.pack("<B", 1))
            parts.append(_pack_str(r.pseudo_label))
        parts.append(struct.pack("<f", r.consistency))
        parts.append(r.embedding.values.astype("<f4").tobytes())
    payload = b"".join(parts)
    header = BANK_MAGIC + struct.pack(
        "<HIQI", BANK_VERSION, bank.dim, len(bank), bank.iteration_watermark
    )
    blob = header + payload + struct.pack("<I", zlib.crc32(payload))

    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_bank(path: str | os.PathLike[str]) -> MemoryBank:
    """Read a bank file, verifying magic, version, structure, and checksum.

    Corruption is classified: a payload that ends mid-record is truncation;
    content that fails to parse under a failed CRC is a checksum error;
    structural junk under a passing CRC is a format error.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    header_size = 4 + struct.calcsize("<HIQI")
    if len(data) < 4:
        raise BankTruncatedError(f"file has {len(data)} bytes, too short for magic")
    if data[:4] != BANK_MAGIC:
        raise BankFormatError(f"bad magic {data[:4]!r}, expected {BANK_MAGIC!r}")
    if len(data) < header_size + 4:
        raise BankTruncatedError(
            f"file has {len(data)} bytes, too short for header and checksum"
        )
    version, dim, count, watermark = struct.unpack(
        "<HIQI", data[4:header_size]
    )
    if version != BANK_VERSION:
        raise BankVersionError(f"unsupported bank version {version}")
    if dim < 1:
        raise BankFormatError(f"invalid dimension {dim}")

    payload = memoryview(data)[header_size:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    crc_ok = stored_crc == zlib.crc32(bytes(payload))

    def content_error(message: str) -> BankLoadError:
        if crc_ok:
            return BankFormatError(message)
        return BankChecksumError(f"payload CRC32 mismatch; first bad content: {message}")

    bank = MemoryBank(dim=dim)
    records: list[MemoryRecord] = []
    offset = 0
    for _ in range(count):
        try:
            qid, offset = _unpack_str(payload, offset)
            raw, offset = _read_exact(payload, offset, 4)
            (iteration,) = struct.unpack("<I", raw)
            text, offset = _unpack_str(payload, offset)
            raw, offset = _read_exact(payload, offset, 1)
            (has_label,) = struct.unpack("<B", raw)
            label: Optional[str] = None
            if has_label == 1:
                label, offset = _unpack_str(payload, offset)
            elif has_label != 0:
                raise BankFormatError(f"invalid label flag {has_label}")
            raw, offset = _read_exact(payload, offset, 4)
            (consistency,) = struct.unpack("<f", raw)
            raw, offset = _read_exact(payload, offset, 4 * dim)
            vec = np.frombuffer(bytes(raw), dtype="<f4")
            question = Question(
                id=qid, text=text, iteration=iteration, source=QuestionSource.GENERATED
            )
            embedding = Embedding.from_normalized_f32(vec)
            records.append(
                MemoryRecord(
                    question=question,
                    embedding=embedding,
                    pseudo_label=label,
                    consistency=float(consistency),
                )
            )
        except BankTruncatedError:
            raise
        except (BankFormatError, ValueError) as exc:
            raise content_error(f"invalid record content: {exc}") from exc

    if offset != len(payload):
        raise content_error(f"{len(payload) - offset} unexpected bytes after records")
    if not crc_ok:
        raise BankChecksumError(
            f"payload CRC32 {zlib.crc32(bytes(payload)):#010x} != stored {stored_crc:#010x}"
        )

    bank._records = records
    bank._watermark = watermark
    return bank
