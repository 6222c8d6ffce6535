"""Deterministic mock backends driven by a scenario script.

A scenario declares a latent pool of question families. Each family carries
narrative templates (isomorphic phrasings of one underlying procedure), a
canonical solver program, a ground-truth answer rule, and a solver accuracy.
The mock embedder maps (family, parameters) to fixed unit vectors with
intra-family cosine >= 0.95 and inter-family cosine <= 0.2 by construction,
so the full loop runs reproducibly at desk scale.
"""

from __future__ import annotations

import ast
import hashlib
import math
import random
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from .backends import (
    BackendSpec,
    BackendSuite,
    Completion,
    Role,
    TokenDistribution,
)
from .core import Config

_EPS = 0.15  # family-noise mixing weight; intra cos >= 1 - 2*eps^2 = 0.955
_NOISE_DIMS_MIN = 8


class ScenarioError(ValueError):
    """Scenario file is malformed; message names the offending field."""


def stable_seed(*parts: Any) -> int:
    joined = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


def _render(template: str, params: dict[str, int]) -> str:
    out = template
    for name, value in params.items():
        out = out.replace("{" + name + "}", str(value))
    return out


_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod, ast.Pow)


def eval_answer_expr(expr: str, params: dict[str, int]) -> str:
    """Evaluate a small arithmetic expression over the family parameters.

    Only literals, parameter names, +-*/ // % ** and unary minus are allowed;
    this is scenario data, never model output.
    """

    def walk(node: ast.AST) -> float:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in params:
                raise ScenarioError(f"answer expression uses unknown parameter {node.id!r}")
            return params[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = walk(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
            left, right = walk(node.left), walk(node.right)
            op = node.op
            if isinstance(op, ast.Add):
                return left + right
            if isinstance(op, ast.Sub):
                return left - right
            if isinstance(op, ast.Mult):
                return left * right
            if isinstance(op, ast.Div):
                return left / right
            if isinstance(op, ast.FloorDiv):
                return left // right
            if isinstance(op, ast.Mod):
                return left % right
            return left**right
        raise ScenarioError(f"unsupported construct in answer expression: {ast.dump(node)}")

    try:
        value = walk(ast.parse(expr, mode="eval"))
    except SyntaxError as exc:
        raise ScenarioError(f"invalid answer expression {expr!r}: {exc}") from exc
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


@dataclass(frozen=True)
class Family:
    """One latent skill: several narrative phrasings of a single procedure."""

    id: str
    templates: tuple[str, ...]
    program: str
    answer: str
    accuracy: float
    codeable: bool = True
    params: dict[str, tuple[int, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    families: tuple[Family, ...]
    dim: int = 48
    challenger_policy: str = "penalty_aware"  # or "ignore"
    malformed_rate: float = 0.0
    unparseable_rate: float = 0.0

    def __post_init__(self) -> None:
        if not self.families:
            raise ScenarioError("families: at least one family is required")
        if self.challenger_policy not in ("penalty_aware", "ignore"):
            raise ScenarioError(
                f"challenger_policy: expected 'penalty_aware' or 'ignore', "
                f"got {self.challenger_policy!r}"
            )
        if self.dim < len(self.families) + _NOISE_DIMS_MIN:
            raise ScenarioError(
                f"dim: need at least n_families + {_NOISE_DIMS_MIN} "
                f"= {len(self.families) + _NOISE_DIMS_MIN}, got {self.dim}"
            )
        ids = [f.id for f in self.families]
        if len(set(ids)) != len(ids):
            raise ScenarioError("families: ids must be unique")
        for rate_name in ("malformed_rate", "unparseable_rate"):
            rate = getattr(self, rate_name)
            if not 0.0 <= rate <= 1.0:
                raise ScenarioError(f"{rate_name}: must be in [0, 1], got {rate}")


def _family_from_mapping(index: int, raw: Any) -> Family:
    where = f"families[{index}]"
    if not isinstance(raw, dict):
        raise ScenarioError(f"{where}: expected a mapping")

    def need(key: str) -> Any:
        if key not in raw:
            raise ScenarioError(f"{where}.{key}: missing required field")
        return raw[key]

    fid = need("id")
    templates = need("templates")
    if not isinstance(templates, list) or not templates:
        raise ScenarioError(f"{where}.templates: expected a non-empty list")
    accuracy = need("accuracy")
    if not isinstance(accuracy, (int, float)) or not 0.0 <= accuracy <= 1.0:
        raise ScenarioError(f"{where}.accuracy: must be a number in [0, 1]")
    params_raw = raw.get("params", {})
    params: dict[str, tuple[int, int]] = {}
    if not isinstance(params_raw, dict):
        raise ScenarioError(f"{where}.params: expected a mapping")
    for name, bounds in params_raw.items():
        if (
            not isinstance(bounds, list)
            or len(bounds) != 2
            or not all(isinstance(b, int) for b in bounds)
            or bounds[0] > bounds[1]
        ):
            raise ScenarioError(f"{where}.params.{name}: expected [lo, hi] integers")
        params[str(name)] = (bounds[0], bounds[1])
    return Family(
        id=str(fid),
        templates=tuple(str(t) for t in templates),
        program=str(need("program")),
        answer=str(need("answer")),
        accuracy=float(accuracy),
        codeable=bool(raw.get("codeable", True)),
        params=params,
    )


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = f" at line {mark.line + 1}" if mark else ""
            raise ScenarioError(f"invalid YAML{line}: {exc}") from exc
    return scenario_from_mapping(raw)


def scenario_from_mapping(raw: Any) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario: expected a top-level mapping")
    families_raw = raw.get("families")
    if not isinstance(families_raw, list):
        raise ScenarioError("families: missing or not a list")
    families = tuple(_family_from_mapping(i, f) for i, f in enumerate(families_raw))
    kwargs: dict[str, Any] = {"families": families}
    for key in ("dim", "challenger_policy", "malformed_rate", "unparseable_rate"):
        if key in raw:
            kwargs[key] = raw[key]
    unknown = set(raw) - {
        "families",
        "dim",
        "challenger_policy",
        "malformed_rate",
        "unparseable_rate",
    }
    if unknown:
        raise ScenarioError(f"unknown scenario fields: {', '.join(sorted(unknown))}")
    return Scenario(**kwargs)


class FamilyRegistry:
    """Maps question or program text back to (family index, parameters)."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self._matchers: list[tuple[int, re.Pattern[str]]] = []
        for idx, fam in enumerate(scenario.families):
            for source in list(fam.templates) + [fam.program]:
                self._matchers.append((idx, _template_regex(source)))

    def identify(self, text: str) -> Optional[tuple[int, tuple[tuple[str, int], ...]]]:
        stripped = text.strip()
        for idx, pattern in self._matchers:
            m = pattern.fullmatch(stripped)
            if m:
                sig = tuple(sorted((k, int(v)) for k, v in m.groupdict().items()))
                return idx, sig
        return None

    def family(self, idx: int) -> Family:
        return self.scenario.families[idx]


def _template_regex(template: str) -> re.Pattern[str]:
    pattern = re.escape(template.strip())
    pattern = re.sub(r"\\\{(\w+)\\\}", r"(?P<\1>-?\\d+)", pattern)
    return re.compile(pattern)


class SkillSpaceEmbedder:
    """Deterministic text-to-vector map organized around the family pool.

    Family members share a dominant one-hot direction plus a small
    parameter-seeded noise component confined to the trailing dimensions;
    unknown text gets a pure noise-subspace vector.
    """

    def __init__(self, scenario: Scenario, registry: FamilyRegistry, seed: int):
        self.spec = BackendSpec(role=Role.EMBEDDER, kind="mock", seed=seed)
        self._registry = registry
        self._dim = scenario.dim
        self._n_families = len(scenario.families)
        self._seed = seed

    def _noise(self, tag: str) -> np.ndarray:
        rng = np.random.default_rng(stable_seed(self._seed, "noise", tag))
        noise = np.zeros(self._dim)
        raw = rng.standard_normal(self._dim - self._n_families)
        noise[self._n_families :] = raw / np.linalg.norm(raw)
        return noise

    def _vector(self, text: str) -> np.ndarray:
        found = self._registry.identify(text)
        if found is None:
            return self._noise(f"fallback|{text}")
        idx, sig = found
        base = np.zeros(self._dim)
        base[idx] = 1.0
        noise = self._noise(f"family|{idx}|{sig}")
        return math.sqrt(1.0 - _EPS**2) * base + _EPS * noise

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._vector(t) for t in texts]


class MockChallenger:
    """Scripted question generator over the family pool.

    The penalty-aware policy greedily picks the family with the smallest
    estimated penalty given the current bank and reward weights (the
    desk-scale stand-in for reward-driven training); the ignore policy
    keeps a fixed concentrated preference regardless of history.
    """

    def __init__(
        self,
        scenario: Scenario,
        registry: FamilyRegistry,
        embedder: SkillSpaceEmbedder,
        seed: int,
        logprob_top_k: Optional[int] = None,
    ):
        self.spec = BackendSpec(
            role=Role.CHALLENGER, kind="mock", seed=seed, logprob_top_k=logprob_top_k
        )
        self._scenario = scenario
        self._registry = registry
        self._embedder = embedder
        self._seed = seed
        self._bank = None
        self._cfg: Optional[Config] = None

    def observe_bank(self, bank, cfg: Config) -> None:
        self._bank = bank
        self._cfg = cfg

    def _family_history_penalties(self) -> np.ndarray:
        n = len(self._scenario.families)
        penalties = np.zeros(n)
        if self._bank is None or len(self._bank) == 0 or self._cfg is None:
            return penalties
        cfg = self._cfg
        bank_mat = np.stack([r.embedding.as_float64() for r in self._bank.records])
        for f in range(n):
            base = np.zeros(self._scenario.dim)
            base[f] = 1.0
            sims = bank_mat @ base
            p_max = float(sims.max())
            p_mean = float(sims.mean())
            penalties[f] = cfg.gamma * max(0.0, p_max - cfg.tau_max) + (
                1.0 - cfg.gamma
            ) * max(0.0, p_mean - cfg.tau_mean)
        return penalties

    def _pick_families(self, n: int) -> list[int]:
        n_families = len(self._scenario.families)
        alpha = self._cfg.alpha if self._cfg is not None else 1.0
        beta = self._cfg.beta if self._cfg is not None else 1.0
        if self._scenario.challenger_policy == "ignore":
            # Concentrated fixed preference: an unregularized generator that
            # keeps hammering its favorite families.
            weights = np.array([0.5**f for f in range(n_families)])
            weights /= weights.sum()
            rng = random.Random(stable_seed(self._seed, "ignore-pick"))
            return [
                rng.choices(range(n_families), weights=list(weights))[0]
                for _ in range(n)
            ]
        history = self._family_history_penalties()
        batch_counts = [0] * n_families
        picks: list[int] = []
        for _ in range(n):
            scores = [
                alpha * (batch_counts[f] + 1) / n + beta * history[f]
                for f in range(n_families)
            ]
            f_best = min(range(n_families), key=lambda f: (scores[f], f))
            picks.append(f_best)
            batch_counts[f_best] += 1
        return picks

    def _distributions(
        self, rng: random.Random, k: int
    ) -> tuple[TokenDistribution, ...]:
        positions = []
        for _ in range(6):
            raw = [rng.random() + 0.05 for _ in range(k)]
            total = sum(raw)
            probs = tuple((f"t{j}", raw[j] / total) for j in range(k))
            positions.append(TokenDistribution(entries=probs, renormalized=True))
        return tuple(positions)

    def complete(
        self,
        messages: list[dict[str, str]],
        n: int = 1,
        seed: Optional[int] = None,
        want_logprobs: bool = False,
    ) -> list[Completion]:
        picks = self._pick_families(n)
        out: list[Completion] = []
        for i, fam_idx in enumerate(picks):
            fam = self._scenario.families[fam_idx]
            rng = random.Random(stable_seed(self._seed, "challenger", seed, i))
            params = {
                name: rng.randint(lo, hi) for name, (lo, hi) in sorted(fam.params.items())
            }
            text = _render(rng.choice(list(fam.templates)), params)
            answer = eval_answer_expr(fam.answer, params)
            if rng.random() < self._scenario.malformed_rate:
                raw = f"<question>\n{text}\n\\boxed{{{answer}}}"
            else:
                raw = f"<question>\n{text}\n</question>\n\\boxed{{{answer}}}"
            dists = None
            if want_logprobs and self.spec.logprob_top_k:
                dists = self._distributions(rng, self.spec.logprob_top_k)
            out.append(Completion(text=raw, token_distributions=dists))
        return out


class MockSolver:
    """Answers with the family ground truth at the scripted accuracy.

    Correct-answer counts are fixed by construction: round(accuracy * K)
    responses carry the true answer, the rest disagree pairwise.
    """

    def __init__(self, scenario: Scenario, registry: FamilyRegistry, seed: int):
        self.spec = BackendSpec(role=Role.SOLVER, kind="mock", seed=seed)
        self._scenario = scenario
        self._registry = registry
        self._seed = seed

    def complete(
        self,
        messages: list[dict[str, str]],
        n: int = 1,
        seed: Optional[int] = None,
        want_logprobs: bool = False,
    ) -> list[Completion]:
        question = messages[-1]["content"]
        found = self._registry.identify(question)
        rng = random.Random(stable_seed(self._seed, "solver", seed, question))
        if found is None:
            return [
                Completion(text="I cannot determine a final answer to this.")
                for _ in range(n)
            ]
        idx, sig = found
        fam = self._registry.family(idx)
        truth = eval_answer_expr(fam.answer, dict(sig))
        n_correct = int(fam.accuracy * n + 0.5)
        answers: list[Optional[str]] = [truth] * n_correct
        for j in range(n - n_correct):
            answers.append(_wrong_answer(truth, j))
        n_unparseable = int(self._scenario.unparseable_rate * n + 0.5)
        for j in range(min(n_unparseable, n - n_correct)):
            answers[n - 1 - j] = None
        rng.shuffle(answers)
        out = []
        for ans in answers:
            if ans is None:
                out.append(Completion(text="The reasoning went in circles; no answer."))
            else:
                out.append(
                    Completion(
                        text=f"Working through the relations step by step gives "
                        f"the result.\nFinal answer: \\boxed{{{ans}}}"
                    )
                )
        return out


def _wrong_answer(truth: str, j: int) -> str:
    try:
        return str(int(truth) + 3 * (j + 1) + 1)
    except ValueError:
        return f"{truth}~{j + 1}"


class MockCoder:
    """Maps a question to its family's canonical program, greedily."""

    def __init__(self, scenario: Scenario, registry: FamilyRegistry, seed: int):
        self.spec = BackendSpec(role=Role.CODER, kind="mock", seed=seed, temperature=0.0)
        self._registry = registry

    def complete(
        self,
        messages: list[dict[str, str]],
        n: int = 1,
        seed: Optional[int] = None,
        want_logprobs: bool = False,
    ) -> list[Completion]:
        prompt = messages[-1]["content"]
        marker = "Input Question: "
        at = prompt.rfind(marker)
        question = prompt[at + len(marker) :].strip() if at >= 0 else prompt.strip()
        found = self._registry.identify(question)
        if found is None:
            return [Completion(text="Unable to express this question as code.")] * n
        idx, sig = found
        fam = self._registry.family(idx)
        if not fam.codeable:
            return [Completion(text="This question does not reduce to a program.")] * n
        code = _render(fam.program, dict(sig)).strip()
        return [Completion(text=f"<CODE>\n{code}\n</CODE>")] * n


class MockJudge:
    """Duplicate iff the new problem's family appears among the references."""

    def __init__(self, scenario: Scenario, registry: FamilyRegistry, seed: int):
        self.spec = BackendSpec(role=Role.JUDGE, kind="mock", seed=seed, temperature=0.0)
        self._registry = registry

    def complete(
        self,
        messages: list[dict[str, str]],
        n: int = 1,
        seed: Optional[int] = None,
        want_logprobs: bool = False,
    ) -> list[Completion]:
        prompt = messages[-1]["content"]
        refs_marker = "## REFERENCE PROBLEMS (from previous iterations):"
        new_marker = "## NEW PROBLEM (from current iteration):"
        imp_marker = "## Important:"
        try:
            refs_text = prompt[
                prompt.index(refs_marker) + len(refs_marker) : prompt.index(new_marker)
            ]
            new_text = prompt[
                prompt.index(new_marker) + len(new_marker) : prompt.index(imp_marker)
            ].strip()
        except ValueError:
            return [Completion(text="DUPLICATE")] * n
        ref_lines = [
            re.sub(r"^\d+\.\s*", "", line.strip())
            for line in refs_text.splitlines()
            if line.strip()
        ]
        new_found = self._registry.identify(new_text)
        if new_found is None:
            return [Completion(text="DUPLICATE")] * n
        new_family = new_found[0]
        ref_families = set()
        for line in ref_lines:
            found = self._registry.identify(line)
            if found is not None:
                ref_families.add(found[0])
        verdict = "DUPLICATE" if new_family in ref_families else "NOVEL"
        return [Completion(text=verdict)] * n


def build_mock_suite(
    scenario: Scenario,
    seed: int,
    cfg: Optional[Config] = None,
    logprob_top_k: Optional[int] = 8,
) -> BackendSuite:
    """Assemble the five deterministic roles over one scenario."""
    registry = FamilyRegistry(scenario)
    embedder = SkillSpaceEmbedder(scenario, registry, seed=stable_seed(seed, "embed"))
    challenger = MockChallenger(
        scenario,
        registry,
        embedder,
        seed=stable_seed(seed, "chal"),
        logprob_top_k=logprob_top_k,
    )
    if cfg is not None:
        challenger.observe_bank(None, cfg)
    suite = BackendSuite(
        challenger=challenger,
        solver=MockSolver(scenario, registry, seed=stable_seed(seed, "solve")),
        coder=MockCoder(scenario, registry, seed=stable_seed(seed, "code")),
        embedder=embedder,
        judge=MockJudge(scenario, registry, seed=stable_seed(seed, "judge")),
    )
    return suite


def synthetic_scenario(
    n_families: int = 40,
    accuracy: float = 0.6,
    policy: str = "penalty_aware",
    dim: Optional[int] = None,
    malformed_rate: float = 0.0,
    unparseable_rate: float = 0.0,
) -> Scenario:
    """Programmatic scenario used by tests and the demo scripts.

    Each family k is a two-parameter arithmetic story told in two narratively
    different but procedurally identical ways.
    """
    families = []
    for k in range(n_families):
        weight = k + 2
        templates = (
            f"Depot {k} loads {{a}} crates weighing {weight} units each and "
            f"then adds {{b}} more units of cargo. What is the total weight?",
            f"A courier on route {k} carries {{a}} parcels of {weight} units "
            f"apiece plus a satchel of {{b}} units. How many units in total?",
        )
        program = (
            f"def solver(n1={{a}}, n2={{b}}):\n"
            f"    x = n1 * {weight} + n2\n"
            f"    return x"
        )
        families.append(
            Family(
                id=f"family_{k:03d}",
                templates=templates,
                program=program,
                answer=f"a * {weight} + b",
                accuracy=accuracy,
                codeable=True,
                params={"a": (3, 30), "b": (5, 50)},
            )
        )
    return Scenario(
        families=tuple(families),
        dim=dim if dim is not None else max(48, n_families + _NOISE_DIMS_MIN),
        challenger_policy=policy,
        malformed_rate=malformed_rate,
        unparseable_rate=unparseable_rate,
    )
