"""BLEU distance, cosine matrices, average-linkage clustering, penalties."""

import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from skillplay.core import Embedding
from skillplay.repetition import (
    ClusterAssignment,
    bleu_distance,
    cluster,
    pairwise_similarity,
    repetition_penalty,
    similarity_to_distance,
)


def bleu_oracle_directional(hyp_s: str, ref_s: str) -> float:
    """Independent reference: exact Fraction precisions, n=1..4, add-one
    smoothing on orders >= 2, standard brevity penalty."""
    hyp, ref = hyp_s.split(), ref_s.split()
    if not hyp:
        return 0.0

    def ngrams(tokens, n):
        return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))

    precisions = []
    for n in range(1, 5):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        if n == 1:
            if matches == 0:
                return 0.0
            precisions.append(Fraction(matches, total))
        else:
            precisions.append(Fraction(matches + 1, total + 1))
    geo_mean = math.exp(sum(math.log(float(p)) for p in precisions) / 4)
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    return bp * geo_mean


def bleu_oracle(a: str, b: str) -> float:
    if not a.split() and not b.split():
        return 0.0
    return min(1.0, max(0.0, 1 - 0.5 * (bleu_oracle_directional(a, b) + bleu_oracle_directional(b, a))))


class TestBleuDistance:
    def test_identical_strings(self):
        assert bleu_distance("the same exact sentence", "the same exact sentence") == 0.0

    def test_token_disjoint(self):
        assert bleu_distance("a b c", "p q r") == pytest.approx(1.0, abs=1e-6)

    def test_reference_pair_frozen_value(self):
        # Oracle value: 1 - (4/5 * 4/5 * 3/4 * 2/3)^(1/4) with BP = 1.
        assert bleu_distance("a b c d e", "a b c d f") == pytest.approx(
            0.24787938138272125, abs=1e-12
        )

    def test_both_empty(self):
        assert bleu_distance("", "") == 0.0

    def test_one_empty(self):
        assert bleu_distance("", "a b") == 1.0

    def test_symmetry_examples(self):
        pairs = [("a b c", "a c b d"), ("x", "x y z"), ("p q p", "q p")]
        for a, b in pairs:
            assert bleu_distance(a, b) == bleu_distance(b, a)

    @given(
        st.lists(st.sampled_from("abcdefg"), max_size=12),
        st.lists(st.sampled_from("abcdefg"), max_size=12),
    )
    def test_matches_independent_oracle(self, ta, tb):
        a, b = " ".join(ta), " ".join(tb)
        assert bleu_distance(a, b) == pytest.approx(bleu_oracle(a, b), abs=1e-9)

    @given(
        st.lists(st.sampled_from("abcde"), max_size=10),
        st.lists(st.sampled_from("abcde"), max_size=10),
    )
    def test_range_and_symmetry(self, ta, tb):
        a, b = " ".join(ta), " ".join(tb)
        d = bleu_distance(a, b)
        assert 0.0 <= d <= 1.0
        assert d == bleu_distance(b, a)


def random_embeddings(rng, n, dim=8):
    return [Embedding(rng.standard_normal(dim)) for _ in range(n)]


class TestPairwiseSimilarity:
    def test_duplicate_vectors(self):
        e = Embedding([1.0, 2.0, 3.0])
        sims = pairwise_similarity([e, e])
        assert np.allclose(sims, 1.0, atol=1e-6)

    def test_orthogonal_pair(self):
        sims = pairwise_similarity([Embedding([1, 0]), Embedding([0, 1])])
        assert sims[0, 1] == 0.0
        assert sims[1, 0] == 0.0

    def test_matches_double_loop_oracle(self, rng):
        embs = random_embeddings(rng, 5)
        sims = pairwise_similarity(embs)
        for i in range(5):
            for j in range(5):
                expected = float(np.dot(embs[i].as_float64(), embs[j].as_float64()))
                assert sims[i, j] == pytest.approx(expected, abs=1e-12)

    def test_exactly_symmetric_with_unit_diag(self, rng):
        sims = pairwise_similarity(random_embeddings(rng, 7))
        assert np.array_equal(sims, sims.T)
        assert np.allclose(np.diag(sims), 1.0, atol=1e-6)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            pairwise_similarity([Embedding([1, 0]), Embedding([1, 0, 0])])


def scipy_average_linkage(distances: np.ndarray, threshold: float) -> list[int]:
    z = linkage(squareform(distances, checks=False), method="average")
    return list(fcluster(z, t=threshold, criterion="distance"))


def same_partition(labels_a, labels_b) -> bool:
    seen = {}
    for a, b in zip(labels_a, labels_b):
        if a in seen:
            if seen[a] != b:
                return False
        else:
            seen[a] = b
    return len(set(seen.values())) == len(seen)


def random_distance_matrix(rng, n, scale=1.0):
    d = rng.uniform(0.0, scale, size=(n, n))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


class TestCluster:
    def test_all_identical_merge_fully(self):
        d = np.zeros((4, 4))
        assignment = cluster(d, threshold=0.5)
        assert assignment.sizes == {0: 4}

    def test_nothing_merges_at_distance_one(self):
        d = np.ones((4, 4)) - np.eye(4)
        assignment = cluster(d, threshold=0.5)
        assert assignment.sizes == {0: 1, 1: 1, 2: 1, 3: 1}
        assert assignment.labels == (0, 1, 2, 3)

    def test_two_tight_pairs_and_outlier(self):
        # Items 0-1 and 2-3 are near; 4 is far from everything.
        d = np.array(
            [
                [0.0, 0.1, 0.9, 0.9, 0.9],
                [0.1, 0.0, 0.9, 0.9, 0.9],
                [0.9, 0.9, 0.0, 0.1, 0.9],
                [0.9, 0.9, 0.1, 0.0, 0.9],
                [0.9, 0.9, 0.9, 0.9, 0.0],
            ]
        )
        assignment = cluster(d, threshold=0.3)
        assert assignment.labels == (0, 0, 1, 1, 2)
        assert assignment.sizes == {0: 2, 1: 2, 2: 1}

    def test_average_linkage_hand_trace(self):
        # 0-1 merge at 0.2; then chain to 2 only if mean(0.35, 0.45) <= t.
        d = np.array(
            [
                [0.0, 0.2, 0.35],
                [0.2, 0.0, 0.45],
                [0.35, 0.45, 0.0],
            ]
        )
        merged = cluster(d, threshold=0.4)
        assert merged.labels == (0, 0, 0)
        split = cluster(d, threshold=0.3)
        assert split.labels == (0, 0, 1)

    def test_deterministic_tie_break(self):
        # Two identical merge candidates (0,1) and (2,3): lowest indices first.
        d = np.full((4, 4), 0.9)
        np.fill_diagonal(d, 0.0)
        d[0, 1] = d[1, 0] = 0.2
        d[2, 3] = d[3, 2] = 0.2
        assignment = cluster(d, threshold=0.5)
        assert assignment.labels == (0, 0, 1, 1)

    def test_rejects_asymmetry(self):
        d = np.zeros((2, 2))
        d[0, 1] = 0.5
        with pytest.raises(ValueError):
            cluster(d, threshold=0.5)

    def test_rejects_nonzero_diagonal(self):
        d = np.eye(3) * 0.2
        with pytest.raises(ValueError):
            cluster(d, threshold=0.5)

    def test_accepts_cosine_range_up_to_two(self):
        # 1 - cosine can reach 2 for antipodal unit vectors.
        d = np.array([[0.0, 2.0], [2.0, 0.0]])
        assignment = cluster(d, threshold=1.0)
        assert assignment.sizes == {0: 1, 1: 1}

    @settings(max_examples=40)
    @given(st.integers(2, 10), st.integers(0, 10_000))
    def test_matches_scipy_on_tie_free_matrices(self, n, seed):
        rng = np.random.default_rng(seed)
        d = random_distance_matrix(rng, n)
        threshold = float(rng.uniform(0.05, 0.95))
        ours = cluster(d, threshold)
        theirs = scipy_average_linkage(d, threshold)
        assert same_partition(ours.labels, theirs)


class TestRepetitionPenalty:
    def test_fully_collapsed_batch(self):
        assignment = ClusterAssignment(labels=(0,) * 8, sizes={0: 8})
        assert repetition_penalty(assignment) == [1.0] * 8

    def test_all_singletons(self):
        assignment = ClusterAssignment(
            labels=tuple(range(8)), sizes={i: 1 for i in range(8)}
        )
        assert repetition_penalty(assignment) == [0.125] * 8

    def test_three_three_two(self):
        labels = (0, 0, 0, 1, 1, 1, 2, 2)
        assignment = ClusterAssignment(labels=labels, sizes={0: 3, 1: 3, 2: 2})
        assert repetition_penalty(assignment) == [
            0.375,
            0.375,
            0.375,
            0.375,
            0.375,
            0.375,
            0.25,
            0.25,
        ]

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
    def test_sum_identity(self, raw_labels):
        # Sum over the batch equals sum over clusters of size^2 / |B|.
        remap = {lab: i for i, lab in enumerate(dict.fromkeys(raw_labels))}
        labels = tuple(remap[lab] for lab in raw_labels)
        sizes = dict(Counter(labels))
        assignment = ClusterAssignment(labels=labels, sizes=sizes)
        penalties = repetition_penalty(assignment)
        expected = sum(c * c for c in sizes.values()) / len(labels)
        assert sum(penalties) == pytest.approx(expected, abs=1e-9)

    @given(st.integers(2, 8), st.integers(0, 1000))
    def test_permutation_equivariance(self, n, seed):
        rng = np.random.default_rng(seed)
        d = random_distance_matrix(rng, n)
        threshold = 0.5
        base = repetition_penalty(cluster(d, threshold))
        perm = rng.permutation(n)
        permuted = d[np.ix_(perm, perm)]
        shuffled = repetition_penalty(cluster(permuted, threshold))
        for new_pos, old_pos in enumerate(perm):
            assert shuffled[new_pos] == pytest.approx(base[old_pos], abs=1e-12)

    def test_merging_never_decreases_any_member_penalty(self):
        before = ClusterAssignment(labels=(0, 0, 1, 2), sizes={0: 2, 1: 1, 2: 1})
        after = ClusterAssignment(labels=(0, 0, 1, 1), sizes={0: 2, 1: 2})
        p_before = repetition_penalty(before)
        p_after = repetition_penalty(after)
        assert all(b >= a for b, a in zip(p_after, p_before))


class TestSimilarityToDistance:
    def test_zero_diagonal_and_clip(self, rng):
        embs = random_embeddings(rng, 6)
        d = similarity_to_distance(pairwise_similarity(embs))
        assert np.all(np.diag(d) == 0.0)
        assert np.all(d >= 0.0) and np.all(d <= 2.0)
