"""Command-line entry point: ``specforge {validate|eval|search|pareto|amortize|diff|replay|suite}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from .edit_engine import EditError, edit_stats
from .gate import GateError
from .harness import HarnessError, SimExecutor, Suite, load_suite, planted_suite
from .proposers import (
    ProposerError,
    RemoteProposer,
    ScriptableProposer,
    TemplateRandomProposer,
    oracle_proposer,
)
from .search import (
    EventBus,
    Evaluator,
    SearchSession,
    best_of_n,
    replay_session,
    run_evolutionary,
    run_greedy,
    run_single_component,
)
from .spec_model import (
    EDITABLE_PRIMITIVES,
    Budget,
    GateConfig,
    SpecError,
    diff_specs,
    load_spec,
)
from .telemetry import (
    ParetoPoint,
    TelemetryError,
    TelemetryStore,
    amortize,
    pareto_mask,
    summarize,
    summary_point,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2
DOMAIN_ERRORS = (SpecError, EditError, GateError, HarnessError, TelemetryError, ProposerError, ValueError, KeyError)
PARETO_COLUMNS = ("label", "accuracy", "cost_usd", "latency_s", "energy_j", "frontier")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_DOMAIN):
        super().__init__(message)
        self.code = code


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from exc


def _load_spec(path: str, fmt: str | None):
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "toml"
    return load_spec(_read(path), fmt)


def _load_suite(args: argparse.Namespace) -> Suite:
    if args.suite:
        return load_suite(_read(args.suite))
    if args.planted is not None:
        return planted_suite(args.planted)
    raise CommandError("a gate suite is required: pass --suite PATH or --planted SEED")


def _store(args: argparse.Namespace) -> TelemetryStore:
    path = args.store or os.environ.get("SPECFORGE_STORE")
    try:
        return TelemetryStore(path)
    except OSError as exc:
        raise CommandError(f"cannot open telemetry store {path}: {exc}", EXIT_IO) from exc


def _emit_json(payload: dict[str, Any], kind: str) -> None:
    body = {"schema": f"specforge.{kind}/{SCHEMA_VERSION}", **payload}
    print(json.dumps(body, sort_keys=True, ensure_ascii=False, indent=2))


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec, args.format)
    if args.json:
        _emit_json({"ok": True, "spec_id": spec.spec_id, "content_hash": spec.content_hash}, "validate")
    else:
        print("OK")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec, args.format)
    suite = _load_suite(args)
    store = _store(args)
    evaluator = Evaluator(suite.tasks, suite.executor(store) if not args.stable else _stable_executor(suite, store),
                          suite.clusters, max_workers=args.workers)
    scores = evaluator(spec)
    records = store.snapshot(spec.content_hash)[-len(suite.tasks):]
    summary = summarize(records, spec.content_hash)
    if args.json:
        _emit_json(
            {
                "spec_hash": spec.content_hash,
                "per_cluster": dict(scores.per_cluster),
                "overall": scores.overall,
                "summary": {
                    "accuracy": summary.mean_accuracy,
                    "cost_usd": summary.mean_cost,
                    "latency_s": summary.mean_latency,
                    "energy_j": summary.mean_energy,
                    "power_w": summary.mean_power,
                },
            },
            "eval",
        )
        return EXIT_OK
    print(f"spec {spec.spec_id} ({spec.content_hash[:12]})")
    for cid in sorted(scores.per_cluster):
        print(f"  {cid:<24} {scores.per_cluster[cid]:.4f}")
    print(f"  {'overall':<24} {scores.overall:.4f}")
    print(f"accuracy {summary.mean_accuracy:.4f}  cost ${summary.mean_cost:.6f}  latency {summary.mean_latency:.3f}s"
          f"  energy {summary.mean_energy:.2f}J  power {summary.mean_power:.2f}W")
    return EXIT_OK


def _stable_executor(suite: Suite, store: TelemetryStore | None) -> SimExecutor:
    return SimExecutor(suite, store, timestamps=False)


def _proposer_factory(args: argparse.Namespace, suite: Suite, move_space: tuple[str, ...]):
    kind = args.proposer
    if kind is None:
        kind = "random" if args.algorithm == "evo" or args.algorithm.startswith("single:") else "oracle"
    if kind == "oracle":
        return lambda seed: oracle_proposer(suite.oracle, move_space)
    if kind == "random":
        return lambda seed: TemplateRandomProposer(move_space, seed)
    if kind == "remote":
        return lambda seed: RemoteProposer.from_env(move_space=move_space)
    if kind.startswith("script:"):
        text = _read(kind.split(":", 1)[1])
        return lambda seed: ScriptableProposer.from_json(text)
    raise CommandError(f"unknown proposer {kind!r}; use oracle, random, remote or script:PATH")


def cmd_search(args: argparse.Namespace) -> int:
    s0 = _load_spec(args.spec, args.format)
    suite = _load_suite(args)
    budget = Budget(
        max_proposals=args.budget_proposals if args.budget_proposals is not None else s0.learning.budget.max_proposals,
        max_task_executions=args.budget_execs if args.budget_execs is not None else s0.learning.budget.max_task_executions,
    )
    gate_cfg = GateConfig(
        epsilon=args.epsilon if args.epsilon is not None else s0.learning.gate_config.epsilon,
        stagnation_k=args.stagnation_k if args.stagnation_k is not None else s0.learning.gate_config.stagnation_k,
    )
    algorithm = args.algorithm
    if algorithm.startswith("single:"):
        tau = algorithm.split(":", 1)[1]
        if tau not in EDITABLE_PRIMITIVES:
            raise CommandError(f"single:<primitive> needs one of {', '.join(EDITABLE_PRIMITIVES)}, got {tau!r}")
        move_space: tuple[str, ...] = (tau,)
    elif algorithm in ("greedy", "evo"):
        tau = ""
        move_space = EDITABLE_PRIMITIVES
    else:
        raise CommandError(f"unknown algorithm {algorithm!r}")
    make_proposer = _proposer_factory(args, suite, move_space)
    store = _store(args) if (args.store or os.environ.get("SPECFORGE_STORE")) else None
    bus = EventBus()
    if not args.quiet:
        bus.subscribe(lambda e: print(f"[{e.session_id}] {e.seq:>4} {e.kind}", file=sys.stderr))

    def runner(seed: int) -> SearchSession:
        evaluator = Evaluator(suite.tasks, _stable_executor(suite, store) if args.stable else suite.executor(store),
                              suite.clusters, max_workers=args.workers)
        proposer = make_proposer(seed)
        if algorithm == "greedy":
            return run_greedy(s0, proposer, evaluator, gate_cfg, budget, seed=seed, bus=bus)
        if algorithm == "evo":
            return run_evolutionary(s0, proposer, evaluator, budget, seed=seed, bus=bus)
        return run_single_component(s0, evaluator, tau, budget, proposer=proposer, seed=seed, bus=bus)

    session = best_of_n(runner, args.restarts, args.seed)
    if args.log:
        try:
            session.write_log(args.log)
        except OSError as exc:
            raise CommandError(f"cannot write session log {args.log}: {exc}", EXIT_IO) from exc
    stats = edit_stats((h.edit, h.accepted) for h in session.history if h.edit is not None)
    accepted = [h for h in session.history if h.accepted and h.edit is not None]
    if args.json:
        _emit_json(
            {
                "session_id": session.session_id,
                "algorithm": session.algorithm,
                "seed": session.seed,
                "restarts": [{"seed": s, "final_score": f} for s, f in session.restarts],
                "initial_spec_hash": session.initial_spec_hash,
                "final_spec_hash": session.final_spec_hash,
                "initial_score": session.initial_scores.overall if session.initial_scores else None,
                "final_score": session.final_score if session.final_scores else None,
                "final_per_cluster": dict(session.final_scores.per_cluster) if session.final_scores else {},
                "stop_reason": session.stop_reason,
                "proposals_used": session.proposals_used,
                "executions_used": session.executions_used,
                "accepted_edits": [h.edit.to_dict() for h in accepted],
                "edit_stats": stats,
            },
            "search",
        )
        return EXIT_OK
    if len(session.restarts) > 1:
        print(f"best of {len(session.restarts)} restarts: seed {session.seed}")
        for seed, final in session.restarts:
            print(f"  seed {seed:<6} {final:.4f}")
    initial = session.initial_scores.overall if session.initial_scores else float("nan")
    print(f"{session.algorithm}: {initial:.4f} -> {session.final_score if session.final_scores else float('nan'):.4f}"
          f"  ({session.stop_reason}; {session.proposals_used} proposals, {session.executions_used} executions)")
    if accepted:
        print(f"{'seq':>4}  {'edit':<16} {'target':<16} {'overall':>8}  primitives")
        for h in accepted:
            target = h.report.target_cluster if h.report else ""
            overall = h.report.overall_after if h.report else float("nan")
            print(f"{h.seq:>4}  {h.edit.edit_id:<16} {target:<16} {overall:>8.4f}  {','.join(h.edit.primitives)}")
    else:
        print("no accepted edits")
    print("edit share: " + "  ".join(f"{p} {v:.2f}" for p, v in stats.items()))
    return EXIT_OK


def _points_from_csv(text: str) -> list[ParetoPoint]:
    rows = list(csv.DictReader(io.StringIO(text)))
    points = []
    for n, row in enumerate(rows):
        try:
            points.append(
                ParetoPoint(
                    row["label"],
                    {
                        "accuracy": float(row["accuracy"]),
                        "cost": float(row["cost_usd"]),
                        "latency": float(row["latency_s"]),
                        "energy": float(row["energy_j"]),
                    },
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CommandError(f"points row {n + 1}: {exc}") from exc
    return points


def cmd_pareto(args: argparse.Namespace) -> int:
    if args.points:
        points = _points_from_csv(_read(args.points))
    else:
        store = _store(args)
        labels = dict(item.split("=", 1) if "=" in item else (item, item) for item in args.labels or ())
        hashes = store.spec_hashes()
        if labels:
            chosen = []
            for label, prefix in labels.items():
                matches = [h for h in hashes if h.startswith(prefix)]
                if len(matches) != 1:
                    raise CommandError(f"label {label}: {len(matches)} specs match hash prefix {prefix!r}")
                chosen.append((label, matches[0]))
        else:
            chosen = [(h[:12], h) for h in hashes]
        points = [summary_point(label, summarize(store.snapshot(h), h)) for label, h in chosen]
    if not points:
        raise CommandError("no points to rank")
    mask = pareto_mask(points)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(PARETO_COLUMNS)
    for p, keep in zip(points, mask):
        v = p.values
        writer.writerow([p.label, repr(v["accuracy"]), repr(v["cost"]), repr(v["latency"]), repr(v["energy"]),
                         "true" if keep else "false"])
    sys.stdout.write(out.getvalue())
    return EXIT_OK


def cmd_amortize(args: argparse.Namespace) -> int:
    result = amortize(args.search_cost, args.queries_per_day, args.days, args.cloud_cost)
    if args.json:
        _emit_json(
            {
                "total_queries": result.total_queries,
                "amortized_per_query": result.amortized_per_query,
                "ratio": result.ratio if result.ratio != float("inf") else None,
                "direction": result.direction,
                "formatted": result.format(),
            },
            "amortize",
        )
    else:
        print(result.format())
    return EXIT_OK


def cmd_diff(args: argparse.Namespace) -> int:
    a = _load_spec(args.a, args.format)
    b = _load_spec(args.b, args.format)
    changes = diff_specs(a, b)
    if args.json:
        _emit_json({"changes": [{"path": p, "before": x, "after": y} for p, x, y in changes]}, "diff")
    else:
        for path, before, after in changes:
            print(f"{path}: {json.dumps(before, ensure_ascii=False)} -> {json.dumps(after, ensure_ascii=False)}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    suite = _load_suite(args)
    evaluator = Evaluator(suite.tasks, _stable_executor(suite, None), suite.clusters)
    result = replay_session(_read(args.log).splitlines(), evaluator)
    if args.json:
        _emit_json({"checked": result.checked, "mismatches": [list(m) for m in result.mismatches]}, "replay")
    else:
        print(f"replayed {result.checked} decisions, {len(result.mismatches)} mismatches")
        for seq, logged, replayed in result.mismatches:
            print(f"  seq {seq}: logged {logged}, replayed {replayed}")
    return EXIT_OK if result.ok else EXIT_DOMAIN


def cmd_suite(args: argparse.Namespace) -> int:
    text = planted_suite(args.seed).to_json()
    if args.output:
        try:
            Path(args.output).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CommandError(f"cannot write {args.output}: {exc}", EXIT_IO) from exc
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specforge", description="Typed AI-stack specs and gated search.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--stable", action="store_true", help="omit timestamps so output is byte-reproducible")
    common.add_argument("--format", choices=("toml", "json"), help="spec file format (default: by extension)")

    suite_opts = argparse.ArgumentParser(add_help=False)
    suite_opts.add_argument("--suite", help="gate suite JSON file")
    suite_opts.add_argument("--planted", type=int, metavar="SEED", help="use a generated planted suite")
    suite_opts.add_argument("--store", help="telemetry JSONL path (default: $SPECFORGE_STORE)")
    suite_opts.add_argument("--workers", type=int, default=None, help="parallel task executions")

    p = sub.add_parser("validate", parents=[common], help="parse and validate a spec file")
    p.add_argument("spec")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", parents=[common, suite_opts], help="score a spec on a gate suite")
    p.add_argument("spec")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", parents=[common, suite_opts], help="search for gate-accepted edits")
    p.add_argument("spec")
    p.add_argument("--algorithm", default="greedy", help="greedy, evo or single:<primitive>")
    p.add_argument("--proposer", help="oracle, random, remote or script:PATH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=1, help="best-of-N over consecutive seeds")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--stagnation-k", type=int)
    p.add_argument("--budget-proposals", type=int)
    p.add_argument("--budget-execs", type=int)
    p.add_argument("--log", help="write the session JSONL here")
    p.add_argument("--quiet", action="store_true", help="no progress events on stderr")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("pareto", help="CSV of points with non-dominated flags")
    p.add_argument("--store", help="telemetry JSONL path (default: $SPECFORGE_STORE)")
    p.add_argument("--points", help="CSV with label,accuracy,cost_usd,latency_s,energy_j")
    p.add_argument("labels", nargs="*", help="LABEL=HASH_PREFIX selections from the store")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("amortize", help="spread a one-time search cost over deployment queries")
    p.add_argument("search_cost", type=float)
    p.add_argument("queries_per_day", type=int)
    p.add_argument("days", type=int)
    p.add_argument("cloud_cost", type=float)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_amortize)

    p = sub.add_parser("diff", parents=[common], help="field-level differences between two specs")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("replay", parents=[common, suite_opts], help="re-check a session log's decisions")
    p.add_argument("log")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("suite", help="write a planted gate suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
