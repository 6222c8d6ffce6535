"""Golden equivalence against the primary CLI's artifact outputs.

The fixture is produced by driving the primary package purely through its
external interfaces (the `skillplay` CLI and its documented file formats);
bridge results must match those outputs exactly.
"""

import json
import os
import subprocess
import sys

import pytest
import yaml

import skillplay
from skillplay.harness import read_jsonl
from skillplay.memory import load_bank
from skillplay.mock import stable_seed, synthetic_scenario

import skillplay_bridge as bridge

SEED = 5
QUESTIONS = 8


def run_cli(*argv):
    subprocess.run(
        [sys.executable, "-m", "skillplay", *argv],
        check=True,
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="module")
def golden(tmp_path_factory):
    """A 2-iteration mock run plus the 1-iteration prefix run whose bank is
    the exact history state iteration 2 was scored against."""
    root = tmp_path_factory.mktemp("golden")
    scenario = synthetic_scenario(n_families=24)
    scenario_path = root / "scenario.yaml"
    scenario_path.write_text(
        yaml.safe_dump(
            {
                "dim": scenario.dim,
                "challenger_policy": scenario.challenger_policy,
                "families": [
                    {
                        "id": f.id,
                        "templates": list(f.templates),
                        "program": f.program,
                        "answer": f.answer,
                        "accuracy": f.accuracy,
                        "params": {k: list(v) for k, v in f.params.items()},
                    }
                    for f in scenario.families
                ],
            }
        )
    )
    full = root / "full"
    prefix = root / "prefix"
    common = ["--scenario", str(scenario_path), "--seed", str(SEED), "--questions", str(QUESTIONS)]
    run_cli("run", *common, "--iterations", "2", "--out", str(full))
    run_cli("run", *common, "--iterations", "1", "--out", str(prefix))
    return {
        "root": root,
        "batch2": read_jsonl(full / "iter_0002" / "challenger_batch.jsonl"),
        "solver2": read_jsonl(full / "iter_0002" / "solver_set.jsonl"),
        "bank1_path": str(prefix / "bank.rdmb"),
    }


def fixture_items(batch_rows):
    items = []
    consistencies = []
    for row in batch_rows:
        items.append(
            {"text": row["text"], "embedding": row["embedding"], "code": row["code"]}
        )
        consistencies.append(row["consistency"])
    return items, consistencies


class TestScoreBatchEquivalence:
    def test_identical_to_run_artifacts(self, golden):
        session = bridge.open_session(bank=golden["bank1_path"])
        items, consistencies = fixture_items(golden["batch2"])
        breakdowns = bridge.score_batch(
            session, items, {"consistencies": consistencies}
        )
        assert len(breakdowns) == len(golden["batch2"])
        for row, b in zip(golden["batch2"], breakdowns):
            assert abs(b.total - row["total"]) <= 1e-12
            assert abs(b.uncertainty - row["uncertainty"]) <= 1e-12
            assert abs(b.p_rep - row["p_rep"]) <= 1e-12
            assert abs(b.p_max - row["p_max"]) <= 1e-12
            assert abs(b.p_mean - row["p_mean"]) <= 1e-12
            assert abs(b.p_map - row["p_map"]) <= 1e-12
        bridge.close(session)

    def test_identical_to_score_cli(self, golden, tmp_path):
        fixture = tmp_path / "fixture.jsonl"
        with open(fixture, "w", encoding="utf-8") as fh:
            for row in golden["batch2"]:
                fh.write(
                    json.dumps(
                        {
                            "id": row["id"],
                            "text": row["text"],
                            "embedding": row["embedding"],
                            "code": row["code"],
                            "consistency": row["consistency"],
                        }
                    )
                    + "\n"
                )
        scored_path = tmp_path / "scored.jsonl"
        run_cli(
            "score",
            "--in", str(fixture),
            "--out", str(scored_path),
            "--bank", golden["bank1_path"],
        )
        cli_rows = read_jsonl(scored_path)

        session = bridge.open_session(bank=golden["bank1_path"])
        items, consistencies = fixture_items(golden["batch2"])
        breakdowns = bridge.score_batch(session, items, {"consistencies": consistencies})
        for cli_row, b in zip(cli_rows, breakdowns):
            assert abs(b.total - cli_row["total"]) <= 1e-12
            assert abs(b.p_map - cli_row["p_map"]) <= 1e-12
        bridge.close(session)

    def test_deterministic_repeat(self, golden):
        session = bridge.open_session(bank=golden["bank1_path"])
        items, consistencies = fixture_items(golden["batch2"])
        a = bridge.score_batch(session, items, {"consistencies": consistencies})
        b = bridge.score_batch(session, items, {"consistencies": consistencies})
        assert a == b
        bridge.close(session)

    def test_empty_batch(self, golden):
        session = bridge.open_session(bank=golden["bank1_path"])
        assert bridge.score_batch(session, [], {"consistencies": []}) == []
        bridge.close(session)

    def test_bank_required_with_history_penalty(self):
        session = bridge.open_session()
        with pytest.raises(bridge.BridgeError, match="bank required"):
            bridge.score_batch(
                session,
                [{"text": "q", "embedding": [1.0, 0.0]}],
                {"consistencies": [0.5]},
            )

    def test_bankless_scoring_with_map_disabled(self):
        session = bridge.open_session(config={"use_map": False})
        breakdowns = bridge.score_batch(
            session,
            [
                {"text": "q0", "embedding": [1.0, 0.0]},
                {"text": "q1", "embedding": [0.0, 1.0]},
            ],
            {"consistencies": [0.5, 0.7]},
        )
        assert breakdowns[0].p_map == 0.0
        assert breakdowns[0].uncertainty == 0.5

    def test_dimension_mismatch_rejected(self, golden):
        session = bridge.open_session(bank=golden["bank1_path"])
        with pytest.raises(bridge.BridgeError, match="dim"):
            bridge.score_batch(
                session,
                [{"text": "q", "embedding": [1.0, 0.0, 0.0]}],
                {"consistencies": [0.5]},
            )
        bridge.close(session)

    def test_closed_session_rejected(self, golden):
        session = bridge.open_session(bank=golden["bank1_path"])
        bridge.close(session)
        with pytest.raises(bridge.BridgeError, match="closed"):
            bridge.score_batch(session, [], {"consistencies": []})


class TestReplaySampleEquivalence:
    def test_reproduces_run_replay_exactly(self, golden):
        replayed_rows = [r for r in golden["solver2"] if r["source"] == "replayed"]
        n_current = sum(1 for r in golden["solver2"] if r["source"] == "generated")
        session = bridge.open_session(bank=golden["bank1_path"])
        # The loop derives its per-iteration replay seed the same way.
        got = bridge.replay_sample(session, n_current, stable_seed(SEED, "replay", 2))
        assert got == [(r["text"], r["label"]) for r in replayed_rows]
        assert len(got) > 0
        bridge.close(session)

    def test_rho_zero_empty(self, golden):
        session = bridge.open_session(config={"rho": 0.0}, bank=golden["bank1_path"])
        assert bridge.replay_sample(session, 70, seed=1) == []

    def test_seed_determinism(self, golden):
        session = bridge.open_session(bank=golden["bank1_path"])
        a = bridge.replay_sample(session, 10, seed=3)
        b = bridge.replay_sample(session, 10, seed=3)
        assert a == b

    def test_bank_required(self):
        session = bridge.open_session()
        with pytest.raises(bridge.BridgeError, match="bank required"):
            bridge.replay_sample(session, 10, seed=1)


class TestSessionShape:
    def test_version_matches_primary(self):
        session = bridge.open_session()
        assert session.version == skillplay.__version__

    def test_config_from_yaml_path(self, golden, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text("rho: 0.5\n")
        session = bridge.open_session(config=str(cfg_path), bank=golden["bank1_path"])
        assert session.config.rho == 0.5

    def test_bank_loaded_via_documented_format(self, golden):
        direct = load_bank(golden["bank1_path"])
        session = bridge.open_session(bank=golden["bank1_path"])
        assert len(session.bank) == len(direct)
        assert session.bank.iteration_watermark == direct.iteration_watermark
