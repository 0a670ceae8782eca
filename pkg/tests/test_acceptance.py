"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the
pytest terminal summary and when this file is run as a script.
"""

from __future__ import annotations

import contextlib
import io
import json
import random
import time
from math import fsum
from pathlib import Path

import pytest

from helpers import random_spec
from specforge.cli import main as cli_main
from specforge.gate import gate_ok
from specforge.harness import brute_force_min_edits, planted_suite
from specforge.proposers import TemplateRandomProposer, oracle_proposer
from specforge.reward import ACCURACY_ONLY, DEFAULT_WEIGHTS, column_stats, composite_reward, normalize
from specforge.search import (
    Evaluator,
    best_of_n,
    replay_session,
    run_evolutionary,
    run_greedy,
    run_single_component,
)
from specforge.spec_model import EDITABLE_PRIMITIVES, Budget, GateConfig, default_spec, parse_spec, serialize_spec
from specforge.telemetry import (
    MeterReading,
    ParetoPoint,
    TelemetryStore,
    aggregate,
    amortize,
    pareto_frontier,
    pareto_mask,
    record,
)

FIXTURES = Path(__file__).parent / "fixtures"
N_SUITES = 20
PROPOSAL_BUDGET = 200
RESULTS: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _evaluator(suite):
    return Evaluator(suite.tasks, suite.executor(), suite.clusters)


@pytest.fixture(scope="module")
def suites():
    return [planted_suite(seed) for seed in range(N_SUITES)]


# 1 -------------------------------------------------------------------------


def _gate_direct(before, after, target, eps):
    if not after[target] > before[target]:
        return False
    for cluster in before:
        if cluster != target and not after[cluster] >= before[cluster] - eps:
            return False
    return True


def test_01_gate_rule_oracle_equivalence():
    rng = random.Random(1)
    n = 10_000
    start = time.perf_counter()
    mismatches = 0
    for i in range(n):
        clusters = [f"c{k}" for k in range(rng.randint(1, 6))]
        # grid values make ties and exact boundary cases common
        if i % 2:
            draw = lambda: rng.randint(0, 20) / 20  # noqa: E731
            eps = rng.choice([0.0, 0.01, 0.05, 0.1])
        else:
            draw = rng.random
            eps = rng.uniform(0.0, 0.2)
        before = {c: draw() for c in clusters}
        after = {c: (before[c] if rng.random() < 0.3 else draw()) for c in clusters}
        target = rng.choice(clusters)
        mismatches += gate_ok(before, after, target, eps) != _gate_direct(before, after, target, eps)
    elapsed = time.perf_counter() - start
    report(1, mismatches == 0 and elapsed < 10.0,
           f"gate rule vs direct evaluation: {mismatches} mismatches over {n} cases in {elapsed:.2f}s (< 10s)")


# 2 -------------------------------------------------------------------------

AMORTIZATION_TABLE = [
    (100, 7, "0.0223 / 2.5× more expensive"),
    (100, 30, "0.0052 / 1.7× cheaper"),
    (100, 180, "0.0009 / 10.4× cheaper"),
    (100, 365, "0.0004 / 21.1× cheaper"),
    (200, 7, "0.0111 / 1.2× more expensive"),
    (200, 30, "0.0026 / 3.5× cheaper"),
    (200, 180, "0.0004 / 20.8× cheaper"),
]


def test_02_amortization_table():
    wrong = [
        (qpd, days, amortize(15.6, qpd, days, 0.009).format(), want)
        for qpd, days, want in AMORTIZATION_TABLE
        if amortize(15.6, qpd, days, 0.009).format() != want
    ]
    report(2, not wrong, f"amortization rows reproduced: {len(AMORTIZATION_TABLE) - len(wrong)}/7 exact"
           + (f"; mismatches {wrong}" if wrong else ""))


# 3 -------------------------------------------------------------------------


def test_03_composite_reward():
    rng = random.Random(3)
    worst = 0.0
    identity = True
    slopes_ok = True
    h = 1e-6
    for _ in range(100):
        r, e, l, c = rng.random(), rng.gauss(0, 2), rng.gauss(0, 2), rng.gauss(0, 2)
        hand = 0.5 * r - 0.1 * e - 0.1 * l - 0.3 * c
        got = composite_reward(r, e, l, c, DEFAULT_WEIGHTS)
        worst = max(worst, abs(got - hand) / max(abs(hand), 1e-300))
        identity &= composite_reward(r, e, l, c, ACCURACY_ONLY) == r
        base = [r, e, l, c]
        for k, expected in enumerate((0.5, -0.1, -0.1, -0.3)):
            up, down = list(base), list(base)
            up[k] += h
            down[k] -= h
            slope = (composite_reward(*up, DEFAULT_WEIGHTS) - composite_reward(*down, DEFAULT_WEIGHTS)) / (2 * h)
            slopes_ok &= abs(slope - expected) <= 1e-6
    ok = worst <= 1e-12 and identity and slopes_ok
    report(3, ok, f"reward max rel err {worst:.1e} (<= 1e-12), accuracy-only identity {identity}, "
           f"finite-difference slopes within 1e-6 {slopes_ok}")


# 4 -------------------------------------------------------------------------


def test_04_normalization():
    rng = random.Random(4)
    worst_mean = worst_var = 0.0
    constant_ok = True
    for _ in range(500):
        n = rng.randint(2, 300)
        scale = 10 ** rng.uniform(-3, 3)
        column = [rng.uniform(0, scale) for _ in range(n)]
        stats = column_stats(column)
        z = [normalize(x, stats) for x in column]
        mean = fsum(z) / n
        var = fsum((v - mean) ** 2 for v in z) / n
        worst_mean = max(worst_mean, abs(mean))
        worst_var = max(worst_var, abs(var - 1.0))
        value = rng.uniform(0, scale)
        flat = column_stats([value] * n)
        constant_ok &= flat.std == 0.0 and all(normalize(value, flat) == 0.0 for _ in range(3))
    ok = worst_mean < 1e-12 and worst_var <= 1e-9 and constant_ok
    report(4, ok, f"normalized |mean| max {worst_mean:.1e} (< 1e-12), |var-1| max {worst_var:.1e} (<= 1e-9), "
           f"sigma=0 columns map to 0: {constant_ok}")


# 5 -------------------------------------------------------------------------

OBJECTIVES = (("accuracy", "max"), ("cost", "min"), ("latency", "min"), ("energy", "min"))


def _brute_force_mask(points):
    def dominates(p, q):
        no_worse = (p["accuracy"] >= q["accuracy"] and p["cost"] <= q["cost"]
                    and p["latency"] <= q["latency"] and p["energy"] <= q["energy"])
        better = (p["accuracy"] > q["accuracy"] or p["cost"] < q["cost"]
                  or p["latency"] < q["latency"] or p["energy"] < q["energy"])
        return no_worse and better

    return [not any(dominates(q.values, p.values) for q in points) for p in points]


def test_05_pareto_frontier():
    rng = random.Random(5)
    mismatches = 0
    not_idempotent = 0
    library_time = 0.0
    for i in range(1000):
        n = rng.randint(0, 200)
        if i % 3 == 0:
            draw = lambda: float(rng.randint(0, 4))  # noqa: E731
        else:
            draw = rng.random
        points = [ParetoPoint(str(k), {name: draw() for name, _ in OBJECTIVES}) for k in range(n)]
        start = time.perf_counter()
        mask = pareto_mask(points, OBJECTIVES)
        front = [p for p, keep in zip(points, mask) if keep]
        again = pareto_frontier(front, OBJECTIVES)
        library_time += time.perf_counter() - start
        mismatches += mask != _brute_force_mask(points)
        not_idempotent += again != front
    ok = mismatches == 0 and not_idempotent == 0 and library_time < 5.0
    report(5, ok, f"frontier vs O(n^2) filter: {mismatches} mismatching sets of 1000, "
           f"{not_idempotent} non-idempotent, {library_time:.2f}s (< 5s)")


# 6 -------------------------------------------------------------------------


def test_06_coordinated_edit_ablation(suites):
    start = time.perf_counter()
    s0 = default_spec()
    greedy_full = 0
    single_full = 0
    oracle_confirmed = 0
    for seed, suite in enumerate(suites):
        session = run_greedy(s0, oracle_proposer(suite.oracle), _evaluator(suite), GateConfig(),
                             Budget(max_proposals=PROPOSAL_BUDGET))
        greedy_full += session.final_score == 1.0
        for tau in EDITABLE_PRIMITIVES:
            single = run_single_component(s0, _evaluator(suite), tau, Budget(max_proposals=PROPOSAL_BUDGET),
                                          seed=seed)
            single_full += single.final_score == 1.0
        [coordinated] = suite.coordinated_clusters()
        reachable_full = brute_force_min_edits(suite, s0, coordinated) == 2
        unreachable_single = all(brute_force_min_edits(suite, s0, coordinated, (p,)) is None
                                 for p in EDITABLE_PRIMITIVES)
        oracle_confirmed += reachable_full and unreachable_single
    elapsed = time.perf_counter() - start
    ok = greedy_full >= 19 and single_full == 0 and oracle_confirmed == N_SUITES and elapsed < 120
    report(6, ok, f"greedy 4-primitive reaches 1.0 on {greedy_full}/20 (>= 19); single-primitive runs reach 1.0 on "
           f"{single_full}/80 (== 0); brute force confirms the landscape on {oracle_confirmed}/20; {elapsed:.1f}s (< 120s)")


# 7 -------------------------------------------------------------------------


def test_07_proposer_ordering(suites):
    s0 = default_spec()
    wins = 0
    for seed, suite in enumerate(suites):
        budget = Budget(max_proposals=PROPOSAL_BUDGET)
        scripted = run_greedy(s0, oracle_proposer(suite.oracle), _evaluator(suite), GateConfig(), budget, seed=seed)
        random_run = run_greedy(s0, TemplateRandomProposer(seed=seed), _evaluator(suite), GateConfig(), budget,
                                seed=seed)
        wins += scripted.final_score >= random_run.final_score
    report(7, wins >= 18, f"scriptable >= template-random final score on {wins}/20 suites (>= 18)")


# 8 -------------------------------------------------------------------------


def _cli_json(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        code = cli_main([str(a) for a in argv])
    return code, buf.getvalue()


def test_08_determinism_and_replay(suites, tmp_path):
    s0 = default_spec()
    checked = 0
    mismatched = 0
    for seed, suite in enumerate(suites[:10]):
        sessions = [
            run_greedy(s0, TemplateRandomProposer(seed=seed), _evaluator(suite), GateConfig(0.01, 20), Budget(60),
                       seed=seed),
            run_greedy(s0, oracle_proposer(suite.oracle), _evaluator(suite), seed=seed),
            run_single_component(s0, _evaluator(suite), EDITABLE_PRIMITIVES[seed % 4], Budget(40), seed=seed),
            run_evolutionary(s0, TemplateRandomProposer(seed=seed), _evaluator(suite), Budget(40), seed=seed),
        ]
        for session in sessions:
            result = replay_session(session.log_lines(), _evaluator(suite))
            checked += result.checked
            mismatched += len(result.mismatches)
    spec_path = tmp_path / "spec.toml"
    spec_path.write_text(serialize_spec(s0))
    suite_path = tmp_path / "suite.json"
    suite_path.write_text(suites[0].to_json())
    identical = True
    for algorithm in ("greedy", "evo", "single:tools"):
        argv = ["search", spec_path, "--suite", suite_path, "--algorithm", algorithm, "--proposer", "random",
                "--seed", 7, "--restarts", 2, "--budget-proposals", 40, "--stable", "--json", "--quiet"]
        first, second = _cli_json(argv), _cli_json(argv)
        identical &= first == second and first[0] == 0
    ok = mismatched == 0 and checked > 0 and identical
    report(8, ok, f"replay reproduced {checked - mismatched}/{checked} logged decisions; "
           f"repeated --stable --json runs byte-identical: {identical}")


# 9 -------------------------------------------------------------------------


def test_09_toml_round_trip_and_examples():
    rng = random.Random(9)
    failures = 0
    for _ in range(1000):
        spec = random_spec(rng)
        once = parse_spec(serialize_spec(spec))
        twice = parse_spec(serialize_spec(once))
        failures += not (once == spec == twice and once.content_hash == spec.content_hash == twice.content_hash)
    consumer = parse_spec((FIXTURES / "consumer.toml").read_text())
    workstation = parse_spec((FIXTURES / "workstation.toml").read_text())
    consumer_ok = (
        consumer.intelligence.model_id == "gemma4:4b-it"
        and consumer.intelligence.quantization == "fp16"
        and consumer.intelligence.max_tokens == 4096
        and consumer.engine.backend == "ollama"
        and consumer.agent.loop_type == "simple"
        and consumer.agent.max_turns == 10
        and consumer.tools.enabled_tools == ("think", "calc", "web_search")
        and consumer.tools.memory_backend == "sqlite_fts"
        and consumer.learning.enabled is False
    )
    workstation_ok = (
        workstation.intelligence.model_id == "qwen3.5:122b"
        and workstation.intelligence.quantization == "fp8"
        and workstation.intelligence.max_tokens == 8192
        and workstation.engine.backend == "vllm"
        and workstation.agent.loop_type == "codeact"
        and workstation.agent.max_turns == 50
        and workstation.tools.enabled_tools
        == ("think", "calc", "code_interpreter", "web_search", "file_read", "git_tool")
        and workstation.tools.memory_backend == "bm25"
        and workstation.learning.enabled is True
        and workstation.learning.policy == "spec_search"
    )
    ok = failures == 0 and consumer_ok and workstation_ok
    report(9, ok, f"round trip with hash equality on {1000 - failures}/1000 random specs; "
           f"consumer example exact {consumer_ok}, workstation example exact {workstation_ok}")


# 10 ------------------------------------------------------------------------


def test_10_telemetry_identity(tmp_path):
    rng = random.Random(10)
    path = tmp_path / "telemetry.jsonl"
    store = TelemetryStore(path)
    hashes = [f"spec{k}" for k in range(7)]
    for i in range(10_000):
        reading = MeterReading(
            energy=rng.uniform(0, 500), latency=rng.uniform(1e-3, 30), cost=rng.uniform(0, 0.05),
            input_tokens=rng.randint(0, 4000), output_tokens=rng.randint(0, 2000),
        )
        record(store, f"q{i}", rng.choice(hashes), rng.choice([0.0, 1.0]), reading,
               local=rng.random() < 0.5, timestamp=float(i))
    reloaded = TelemetryStore(path).snapshot()
    power_ok = len(reloaded) == 10_000 and all(r.power == r.energy / r.latency for r in reloaded)
    raw = [json.loads(line) for line in path.read_text().splitlines()]
    summaries_ok = True
    for h in hashes:
        rows = [r for r in raw if r["spec_hash"] == h]
        s = aggregate(store, h)
        n = len(rows)
        summaries_ok &= (
            s.n_queries == n
            and s.mean_accuracy == fsum(r["accuracy"] for r in rows) / n
            and s.total_energy == fsum(r["energy"] for r in rows)
            and s.mean_latency == fsum(r["latency"] for r in rows) / n
            and s.mean_power == fsum(r["energy"] / r["latency"] for r in rows) / n
            and s.total_cost == fsum(r["cost"] for r in rows)
        )
    report(10, power_ok and summaries_ok,
           f"power == energy/latency on all 10000 records: {power_ok}; summaries match raw-store replay: {summaries_ok}")


# 11 ------------------------------------------------------------------------


def test_11_best_of_n_monotone(suites):
    s0 = default_spec()
    monotone = 0
    for suite in suites:
        def runner(seed, suite=suite):
            return run_greedy(s0, TemplateRandomProposer(seed=seed), _evaluator(suite), GateConfig(),
                              Budget(max_proposals=40), seed=seed)

        scores = [best_of_n(runner, n, base_seed=100).final_score for n in (1, 3, 5)]
        monotone += scores[0] <= scores[1] <= scores[2]
    report(11, monotone == N_SUITES, f"best-of-N nondecreasing for N in 1,3,5 on {monotone}/20 suites")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
