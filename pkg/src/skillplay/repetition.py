"""Within-batch repetition penalty via average-linkage clustering.

Two distance sources feed the clustering: 1 - cosine over skill embeddings,
or symmetrized sentence BLEU as the lexical baseline.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Embedding

_MAX_NGRAM = 4


@dataclass(frozen=True, slots=True)
class ClusterAssignment:
    """Flat clustering of a batch: one label per item, contiguous ids from 0."""

    labels: tuple[int, ...]
    sizes: dict[int, int]

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("assignment must cover at least one item")
        counted = Counter(self.labels)
        if dict(counted) != self.sizes:
            raise ValueError("sizes must match label multiplicities")
        ids = sorted(self.sizes)
        if ids != list(range(len(ids))):
            raise ValueError("cluster ids must be contiguous from 0")

    @property
    def batch_size(self) -> int:
        return len(self.labels)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_directional(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Sentence BLEU, n-grams 1..4, uniform weights, add-one smoothing on
    orders >= 2, standard brevity penalty."""
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, _MAX_NGRAM + 1):
        hyp_counts = _ngram_counts(hyp, n)
        ref_counts = _ngram_counts(ref, n)
        matches = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        total = max(len(hyp) - n + 1, 0)
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_sum += math.log(p)
    precision = math.exp(log_sum / _MAX_NGRAM)
    if len(hyp) > len(ref):
        bp = 1.0
    else:
        bp = math.exp(1.0 - len(ref) / len(hyp))
    return bp * precision


def bleu_distance(a: str, b: str) -> float:
    """Symmetrized lexical distance: 1 - mean of both BLEU directions.

    Whitespace tokenization; identical strings give 0, token-disjoint give 1,
    and two empty strings give 0 by convention.
    """
    ta = a.split()
    tb = b.split()
    if not ta and not tb:
        return 0.0
    score = 0.5 * (_bleu_directional(ta, tb) + _bleu_directional(tb, ta))
    return min(1.0, max(0.0, 1.0 - score))


def pairwise_similarity(embeddings: Sequence[Embedding]) -> np.ndarray:
    """Cosine similarity matrix; embeddings are pre-normalized so this is a
    plain Gram matrix. Exactly symmetric by construction."""
    if not embeddings:
        raise ValueError("batch must contain at least one embedding")
    dim = embeddings[0].dim
    for e in embeddings:
        if e.dim != dim:
            raise ValueError(f"dimension mismatch: {e.dim} vs {dim}")
    mat = np.stack([e.as_float64() for e in embeddings])
    sims = mat @ mat.T
    return np.triu(sims) + np.triu(sims, 1).T


def similarity_to_distance(sims: np.ndarray) -> np.ndarray:
    """1 - cosine, with an exactly zero diagonal."""
    d = 1.0 - sims
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 2.0)


def cluster(distances: np.ndarray, threshold: float) -> ClusterAssignment:
    """Average-linkage agglomerative clustering cut at `threshold`.

    Merges while the smallest inter-cluster mean distance is <= threshold.
    Ties break on the smallest (min original index of A, min original index
    of B), so identical inputs cluster identically on every platform.
    Accepts distances in [0, 2] (the 1 - cosine range).
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    n = d.shape[0]
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if not np.allclose(d, d.T, atol=1e-12):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.abs(np.diag(d)) > 1e-12):
        raise ValueError("distance matrix diagonal must be zero")
    if np.any(d < -1e-12) or np.any(d > 2.0 + 1e-12):
        raise ValueError("distance entries must lie in [0, 2]")

    clusters: list[list[int]] = [[i] for i in range(n)]
    while len(clusters) > 1:
        best: tuple[float, int, int] | None = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                link = float(np.mean(d[np.ix_(clusters[a], clusters[b])]))
                lo, hi = sorted((clusters[a][0], clusters[b][0]))
                key = (link, lo, hi)
                if best is None or key < best:
                    best = key
        assert best is not None
        link, _, _ = best
        if link > threshold:
            break
        ia = next(i for i, c in enumerate(clusters) if c[0] == best[1])
        ib = next(i for i, c in enumerate(clusters) if c[0] == best[2])
        merged = sorted(clusters[ia] + clusters[ib])
        clusters = [c for i, c in enumerate(clusters) if i not in (ia, ib)]
        clusters.append(merged)

    clusters.sort(key=lambda c: c[0])
    labels = [0] * n
    sizes: dict[int, int] = {}
    for cid, members in enumerate(clusters):
        sizes[cid] = len(members)
        for m in members:
            labels[m] = cid
    return ClusterAssignment(labels=tuple(labels), sizes=sizes)


def repetition_penalty(assignment: ClusterAssignment) -> list[float]:
    """Per-item penalty: own cluster size over batch size, in (0, 1]."""
    b = assignment.batch_size
    return [assignment.sizes[label] / b for label in assignment.labels]
