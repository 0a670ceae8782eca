from __future__ import annotations

import csv
import io
import json

import pytest

from specforge.cli import main
from specforge.edit_engine import apply
from specforge.harness import planted_suite
from specforge.spec_model import default_spec, serialize_spec


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("SPECFORGE_STORE", raising=False)
    spec = tmp_path / "spec.toml"
    spec.write_text(serialize_spec(default_spec()))
    suite = tmp_path / "suite.json"
    suite.write_text(planted_suite(42, pair=("agent", "tools")).to_json())
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_validate(workspace, capsys):
    assert run(capsys, "validate", workspace / "spec.toml") == (0, "OK\n", "")
    bad = workspace / "bad.toml"
    bad.write_text(serialize_spec(default_spec()).replace('"simple"', '"bogus"'))
    code, _, err = run(capsys, "validate", bad)
    assert code == 1 and "agent.loop_type" in err
    code, _, _ = run(capsys, "validate", workspace / "missing.toml")
    assert code == 2


def test_validate_json_schema(workspace, capsys):
    code, out, _ = run(capsys, "validate", workspace / "spec.toml", "--json")
    body = json.loads(out)
    assert code == 0
    assert body["schema"] == "specforge.validate/1"
    assert body["content_hash"] == default_spec().content_hash


def test_eval_writes_telemetry(workspace, capsys):
    store = workspace / "telemetry.jsonl"
    code, out, _ = run(capsys, "eval", workspace / "spec.toml", "--suite", workspace / "suite.json",
                       "--store", store, "--json", "--stable")
    body = json.loads(out)
    assert code == 0
    assert body["schema"] == "specforge.eval/1"
    assert body["overall"] == 0.0
    assert set(body["summary"]) == {"accuracy", "cost_usd", "latency_s", "energy_j", "power_w"}
    rows = [json.loads(line) for line in store.read_text().splitlines()]
    assert len(rows) == len(planted_suite(42, pair=("agent", "tools")).tasks)
    assert all(r["timestamp"] == 0.0 for r in rows)
    code, again, _ = run(capsys, "eval", workspace / "spec.toml", "--suite", workspace / "suite.json",
                         "--store", store, "--json", "--stable")
    assert again == out


def test_eval_on_all_pass_suite(workspace, capsys):
    suite = planted_suite(42, pair=("agent", "tools"))
    fixed = default_spec()
    for entry in suite.oracle:
        fixed = apply(fixed, entry.edit)
    path = workspace / "fixed.toml"
    path.write_text(serialize_spec(fixed))
    code, out, _ = run(capsys, "eval", path, "--suite", workspace / "suite.json", "--json")
    assert code == 0 and json.loads(out)["overall"] == 1.0


def test_eval_needs_a_suite(workspace, capsys):
    code, _, err = run(capsys, "eval", workspace / "spec.toml")
    assert code == 1 and "suite" in err


def test_search_restarts_and_log(workspace, capsys):
    log = workspace / "session.jsonl"
    code, out, _ = run(capsys, "search", workspace / "spec.toml", "--suite", workspace / "suite.json",
                       "--restarts", "5", "--quiet", "--log", log)
    assert code == 0
    assert "best of 5 restarts" in out
    assert "1.0000" in out
    code, out, _ = run(capsys, "replay", log, "--suite", workspace / "suite.json")
    assert code == 0 and "0 mismatches" in out


def test_search_single_agent_below_greedy(workspace, capsys):
    common = ("search", workspace / "spec.toml", "--suite", workspace / "suite.json", "--json", "--quiet")
    _, greedy, _ = run(capsys, *common)
    _, single, _ = run(capsys, *common, "--algorithm", "single:agent", "--budget-proposals", "60")
    assert json.loads(single)["final_score"] < json.loads(greedy)["final_score"] == 1.0


def test_search_zero_budget(workspace, capsys):
    code, out, _ = run(capsys, "search", workspace / "spec.toml", "--suite", workspace / "suite.json",
                       "--budget-proposals", "0", "--json", "--quiet")
    body = json.loads(out)
    assert code == 0
    assert body["proposals_used"] == 0 and body["accepted_edits"] == []
    assert body["final_spec_hash"] == body["initial_spec_hash"]


def test_search_stable_output_is_byte_identical(workspace, capsys):
    args = ("search", workspace / "spec.toml", "--suite", workspace / "suite.json", "--algorithm", "evo",
            "--budget-proposals", "30", "--seed", "3", "--stable", "--json", "--quiet")
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args)
    assert a == b
    assert json.loads(a)["schema"] == "specforge.search/1"


def test_search_progress_goes_to_stderr(workspace, capsys):
    _, _, err = run(capsys, "search", workspace / "spec.toml", "--suite", workspace / "suite.json")
    assert "accept" in err
    _, _, quiet = run(capsys, "search", workspace / "spec.toml", "--suite", workspace / "suite.json", "--quiet")
    assert quiet == ""


def test_search_bad_algorithm(workspace, capsys):
    code, _, _ = run(capsys, "search", workspace / "spec.toml", "--planted", "1", "--algorithm", "single:learning")
    assert code == 1
    code, _, _ = run(capsys, "search", workspace / "spec.toml", "--planted", "1", "--algorithm", "annealing")
    assert code == 1


def test_search_with_script(workspace, capsys):
    script = workspace / "script.json"
    script.write_text(json.dumps([{"ops": [{"path": "agent.max_turns", "op": "set", "value": 1}]}]))
    code, out, _ = run(capsys, "search", workspace / "spec.toml", "--suite", workspace / "suite.json",
                       "--proposer", f"script:{script}", "--json", "--quiet")
    assert code == 0 and json.loads(out)["proposals_used"] == 1


def test_remote_proposer_without_endpoint(workspace, capsys, monkeypatch):
    monkeypatch.delenv("SPECFORGE_PROPOSER_URL", raising=False)
    code, _, err = run(capsys, "search", workspace / "spec.toml", "--suite", workspace / "suite.json",
                       "--proposer", "remote", "--quiet")
    assert code == 1 and "SPECFORGE_PROPOSER_URL" in err


def test_amortize(capsys):
    assert run(capsys, "amortize", 15.6, 100, 7, 0.009)[1] == "0.0223 / 2.5× more expensive\n"
    assert run(capsys, "amortize", 15.6, 100, 180, 0.009)[1] == "0.0009 / 10.4× cheaper\n"
    code, out, _ = run(capsys, "amortize", 15.6, 100, 7, 0.009, "--json")
    assert json.loads(out)["formatted"] == "0.0223 / 2.5× more expensive"


def test_pareto_points(workspace, capsys):
    points = workspace / "points.csv"
    points.write_text(
        "label,accuracy,cost_usd,latency_s,energy_j\n"
        "A,0.803,0.0000113,1.0,10.0\n"
        "B,0.835,0.009,1.0,10.0\n"
        "C,0.70,0.005,1.0,10.0\n"
    )
    code, out, _ = run(capsys, "pareto", "--points", points)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0
    assert list(rows[0]) == ["label", "accuracy", "cost_usd", "latency_s", "energy_j", "frontier"]
    assert {r["label"]: r["frontier"] for r in rows} == {"A": "true", "B": "true", "C": "false"}


def test_pareto_from_store(workspace, capsys, monkeypatch):
    store = workspace / "t.jsonl"
    monkeypatch.setenv("SPECFORGE_STORE", str(store))
    run(capsys, "eval", workspace / "spec.toml", "--suite", workspace / "suite.json")
    code, out, _ = run(capsys, "pareto", f"base={default_spec().content_hash[:10]}")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and rows[0]["label"] == "base" and rows[0]["frontier"] == "true"
    code, _, _ = run(capsys, "pareto", "x=ffff")
    assert code == 1


def test_diff(workspace, capsys):
    spec = workspace / "spec.toml"
    assert run(capsys, "diff", spec, spec) == (0, "", "")
    other = workspace / "other.toml"
    other.write_text(spec.read_text().replace("max_turns = 10", "max_turns = 12"))
    code, out, _ = run(capsys, "diff", spec, other)
    assert code == 0 and out == "agent.max_turns: 10 -> 12\n"


def test_suite_command(tmp_path, capsys):
    out_path = tmp_path / "s.json"
    assert run(capsys, "suite", "--seed", 4, "-o", out_path)[0] == 0
    assert out_path.read_text() == planted_suite(4).to_json()
