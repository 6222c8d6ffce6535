"""Memory bank: ingestion, similarity queries, hinge penalty, replay,
and the checksummed binary persistence format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillplay.core import Embedding, Question, validate_config
from skillplay.memory import (
    BankChecksumError,
    BankFormatError,
    BankTruncatedError,
    BankVersionError,
    MemoryBank,
    MemoryRecord,
    load_bank,
    map_penalty,
    max_similarity,
    mean_similarity,
    replay_count,
    sample_replay,
    save_bank,
    update_bank,
)

DIM = 8


def make_question(i, iteration=1):
    return Question(id=f"it{iteration:04d}_q{i:03d}", text=f"question {i}", iteration=iteration)


def make_bank(rng, n, iteration=1, labeled=True, dim=DIM):
    cfg = validate_config({})
    bank = MemoryBank(dim=dim)
    batch = []
    for i in range(n):
        emb = Embedding(rng.standard_normal(dim))
        label = f"ans{i}" if labeled else None
        batch.append((make_question(i, iteration), emb, 0.5, label))
    bank.ingest(iteration, batch, cfg)
    return bank


class TestIngest:
    def test_validity_filter_applied(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        batch = [
            (make_question(i), Embedding(rng.standard_normal(DIM)), s, "x")
            for i, s in enumerate([0.2, 0.5, 0.9])
        ]
        bank.ingest(1, batch, cfg)
        assert len(bank) == 1
        assert bank.records[0].consistency == 0.5

    def test_empty_batch_advances_watermark(self, cfg):
        bank = MemoryBank(dim=DIM)
        bank.ingest(1, [], cfg)
        assert len(bank) == 0
        assert bank.iteration_watermark == 1

    def test_reingest_rejected(self, cfg, rng):
        bank = make_bank(rng, 3)
        with pytest.raises(ValueError, match="watermark"):
            bank.ingest(1, [], cfg)

    def test_append_order_preserved(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        batch = [
            (make_question(i), Embedding(rng.standard_normal(DIM)), 0.5, "x")
            for i in range(5)
        ]
        bank.ingest(1, batch, cfg)
        assert [r.question.id for r in bank.records] == [q.id for q, _, _, _ in batch]

    def test_dim_mismatch_rejected(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        with pytest.raises(ValueError, match="dim"):
            bank.ingest(
                1, [(make_question(0), Embedding(rng.standard_normal(DIM + 1)), 0.5, "x")], cfg
            )

    def test_wrong_iteration_in_batch_rejected(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        with pytest.raises(ValueError, match="iteration"):
            bank.ingest(
                2, [(make_question(0, iteration=1), Embedding(np.ones(DIM)), 0.5, "x")], cfg
            )

    def test_functional_alias(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        out = update_bank(bank, 1, [], cfg)
        assert out is bank

    def test_scan_invariant_only_valid_consistencies(self, cfg, rng):
        bank = make_bank(rng, 20)
        for record in bank.records:
            assert cfg.valid_lo <= record.consistency <= cfg.valid_hi


class TestSimilarityQueries:
    def test_self_similarity(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        e = Embedding(rng.standard_normal(DIM))
        bank.ingest(1, [(make_question(0), e, 0.5, "x")], cfg)
        assert max_similarity(bank, e) == pytest.approx(1.0, abs=1e-6)

    def test_empty_bank_sentinel(self):
        bank = MemoryBank(dim=DIM)
        e = Embedding(np.ones(DIM))
        assert max_similarity(bank, e) == -1.0
        assert mean_similarity(bank, e) == -1.0

    def test_max_matches_naive_scan(self, rng):
        bank = make_bank(rng, 100)
        for _ in range(10):
            e = Embedding(rng.standard_normal(DIM))
            expected = max(
                float(np.dot(r.embedding.as_float64(), e.as_float64()))
                for r in bank.records
            )
            assert max_similarity(bank, e) == pytest.approx(expected, abs=1e-9)

    def test_mean_matches_running_sum_oracle(self, rng):
        bank = make_bank(rng, 57)
        for _ in range(10):
            e = Embedding(rng.standard_normal(DIM))
            total = 0.0
            for r in bank.records:
                total += float(np.dot(r.embedding.as_float64(), e.as_float64()))
            assert mean_similarity(bank, e) == pytest.approx(total / 57, abs=1e-9)

    def test_cancellation(self, cfg):
        v = np.zeros(DIM)
        v[0] = 1.0
        e = Embedding(v)
        anti = Embedding(-v)
        bank = MemoryBank(dim=DIM)
        bank.ingest(
            1,
            [(make_question(0), e, 0.5, "x"), (make_question(1), anti, 0.5, "y")],
            cfg,
        )
        assert mean_similarity(bank, e) == pytest.approx(0.0, abs=1e-6)

    def test_singleton_bank(self, cfg, rng):
        e = Embedding(rng.standard_normal(DIM))
        bank = MemoryBank(dim=DIM)
        bank.ingest(1, [(make_question(0), e, 0.5, "x")], cfg)
        assert mean_similarity(bank, e) == pytest.approx(1.0, abs=1e-6)

    def test_dim_mismatch_rejected(self, rng):
        bank = make_bank(rng, 3)
        with pytest.raises(ValueError):
            max_similarity(bank, Embedding(np.ones(DIM + 2)))

    def test_monotone_max_under_insertion(self, cfg, rng):
        bank = MemoryBank(dim=DIM)
        query = Embedding(rng.standard_normal(DIM))
        previous = -1.0
        for t in range(1, 40):
            batch = [
                (make_question(0, iteration=t), Embedding(rng.standard_normal(DIM)), 0.5, "x")
            ]
            bank.ingest(t, batch, cfg)
            current = max_similarity(bank, query)
            assert current >= previous - 1e-12
            previous = current


class TestMapPenalty:
    def test_reference_arithmetic(self, cfg):
        assert map_penalty(0.7, 0.3, cfg) == pytest.approx(0.125, abs=1e-12)

    def test_below_thresholds(self, cfg):
        assert map_penalty(0.4, 0.2, cfg) == 0.0

    def test_saturation(self, cfg):
        assert map_penalty(1.0, 1.0, cfg) == pytest.approx(0.625, abs=1e-12)

    def test_empty_bank_sentinel_gives_zero(self, cfg):
        assert map_penalty(-1.0, -1.0, cfg) == 0.0

    def test_out_of_range_rejected(self, cfg):
        with pytest.raises(ValueError):
            map_penalty(1.5, 0.0, cfg)

    def test_ablation_switches(self):
        no_max = validate_config({"use_max_term": False})
        assert map_penalty(1.0, 1.0, no_max) == pytest.approx(0.5 * 0.75)
        no_mean = validate_config({"use_mean_term": False})
        assert map_penalty(1.0, 1.0, no_mean) == pytest.approx(0.5 * 0.5)
        no_map = validate_config({"use_map": False})
        assert map_penalty(1.0, 1.0, no_map) == 0.0

    @given(st.floats(-1, 0.5, allow_nan=False), st.floats(-1, 0.25, allow_nan=False))
    def test_flat_inside_subthreshold_box(self, p_max, p_mean):
        cfg = validate_config({})
        assert map_penalty(p_max, p_mean, cfg) == 0.0

    def test_finite_difference_slopes(self, cfg):
        h = 1e-4
        for p_max in (0.6, 0.8, 0.95):
            slope = (map_penalty(p_max + h, 0.0, cfg) - map_penalty(p_max - h, 0.0, cfg)) / (2 * h)
            assert slope == pytest.approx(cfg.gamma, abs=1e-6)
        for p_mean in (0.4, 0.6, 0.9):
            slope = (map_penalty(0.0, p_mean + h, cfg) - map_penalty(0.0, p_mean - h, cfg)) / (2 * h)
            assert slope == pytest.approx(1 - cfg.gamma, abs=1e-6)


class TestReplay:
    def test_reference_ratio_exact(self, cfg, rng):
        bank = make_bank(rng, 200)
        sample = sample_replay(bank, 70, cfg, seed=1)
        assert len(sample) == 30
        assert len(sample) / (len(sample) + 70) == pytest.approx(0.3)

    def test_rho_zero_disables(self, rng):
        cfg = validate_config({"rho": 0.0})
        bank = make_bank(rng, 50)
        assert sample_replay(bank, 70, cfg, seed=1) == []

    def test_use_replay_switch(self, rng):
        cfg = validate_config({"use_replay": False})
        bank = make_bank(rng, 50)
        assert sample_replay(bank, 70, cfg, seed=1) == []

    def test_exhaustion_clamp(self, cfg, rng):
        bank = make_bank(rng, 5)
        sample = sample_replay(bank, 70, cfg, seed=1)
        assert len(sample) == 5

    def test_only_labeled_records_eligible(self, cfg, rng):
        bank = make_bank(rng, 50, labeled=False)
        assert sample_replay(bank, 70, cfg, seed=1) == []

    def test_deterministic_given_seed(self, cfg, rng):
        bank = make_bank(rng, 100)
        a = sample_replay(bank, 70, cfg, seed=42)
        b = sample_replay(bank, 70, cfg, seed=42)
        assert [r.question.id for r in a] == [r.question.id for r in b]
        c = sample_replay(bank, 70, cfg, seed=43)
        assert [r.question.id for r in a] != [r.question.id for r in c]

    def test_without_replacement(self, cfg, rng):
        bank = make_bank(rng, 100)
        sample = sample_replay(bank, 70, cfg, seed=7)
        ids = [r.question.id for r in sample]
        assert len(set(ids)) == len(ids)

    @given(st.integers(1, 500), st.sampled_from([0.1, 0.3, 0.5]))
    def test_ratio_bound(self, n_current, rho):
        m = replay_count(n_current, rho)
        achieved = m / (m + n_current)
        assert abs(achieved - rho) <= 1 / (m + n_current)


class TestPersistence:
    def test_round_trip(self, cfg, rng, tmp_path):
        bank = make_bank(rng, 37)
        bank.ingest(2, [], cfg)  # watermark-only advance must survive
        path = tmp_path / "bank.rdmb"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert loaded.dim == bank.dim
        assert loaded.iteration_watermark == 2
        assert len(loaded) == len(bank)
        for a, b in zip(loaded.records, bank.records):
            assert a.question == b.question
            assert a.pseudo_label == b.pseudo_label
            assert np.array_equal(a.embedding.values, b.embedding.values)
            assert np.float32(a.consistency) == np.float32(b.consistency)

    def test_unlabeled_and_unicode_round_trip(self, cfg, tmp_path):
        bank = MemoryBank(dim=4)
        q = Question(id="it0001_q000", text="Combien de pièces ? №7", iteration=1)
        bank.ingest(1, [(q, Embedding([1, 2, 3, 4]), 0.5, None)], cfg)
        save_bank(bank, tmp_path / "b.rdmb")
        loaded = load_bank(tmp_path / "b.rdmb")
        assert loaded.records[0].pseudo_label is None
        assert loaded.records[0].question.text == q.text

    def test_append_after_load(self, cfg, rng, tmp_path):
        bank = make_bank(rng, 10)
        path = tmp_path / "bank.rdmb"
        save_bank(bank, path)
        loaded = load_bank(path)
        batch = [
            (make_question(i, iteration=2), Embedding(rng.standard_normal(DIM)), 0.5, "x")
            for i in range(4)
        ]
        loaded.ingest(2, batch, cfg)
        save_bank(loaded, path)
        again = load_bank(path)
        assert len(again) == 14
        assert again.iteration_watermark == 2

    def test_wrong_magic(self, rng, tmp_path):
        path = tmp_path / "bank.rdmb"
        save_bank(make_bank(rng, 3), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(BankFormatError):
            load_bank(path)

    def test_version_mismatch(self, rng, tmp_path):
        path = tmp_path / "bank.rdmb"
        save_bank(make_bank(rng, 3), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(BankVersionError):
            load_bank(path)

    def test_truncation(self, rng, tmp_path):
        path = tmp_path / "bank.rdmb"
        save_bank(make_bank(rng, 3), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 9])
        with pytest.raises(BankTruncatedError):
            load_bank(path)

    def test_checksum_failure(self, rng, tmp_path):
        path = tmp_path / "bank.rdmb"
        save_bank(make_bank(rng, 3), path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF  # flip a payload byte
        path.write_bytes(bytes(blob))
        with pytest.raises(BankChecksumError):
            load_bank(path)

    def test_rollback_drops_suffix(self, cfg, rng):
        bank = make_bank(rng, 5, iteration=1)
        batch = [
            (make_question(i, iteration=2), Embedding(rng.standard_normal(DIM)), 0.5, "x")
            for i in range(3)
        ]
        bank.ingest(2, batch, cfg)
        bank.rollback_to(1)
        assert len(bank) == 5
        assert bank.iteration_watermark == 1
