"""Greedy gated search, evolutionary Pareto search and single-slot baselines."""

from __future__ import annotations

import json
import logging
import math
import random
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .edit_engine import Edit, EditError, FieldOp, apply, enumerate_catalog, undo_ops
from .gate import (
    FailureCluster,
    GateReport,
    GateScores,
    TaskRecord,
    make_report,
    score,
)
from .proposers import (
    Diagnosis,
    Proposer,
    ProposerError,
    ProposerExhausted,
    TemplateRandomProposer,
    diagnose,
    stamp,
)
from .spec_model import EDITABLE_PRIMITIVES, Budget, GateConfig, Spec, spec_from_dict, spec_to_dict
from .telemetry import ParetoPoint, pareto_mask

log = logging.getLogger(__name__)

ALGORITHMS = ("greedy_gated", "evolutionary", "single_component")
MERGE_PROBABILITY = 0.25


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class Event:
    kind: str
    session_id: str
    seq: int
    data: Mapping[str, Any] = field(default_factory=dict)


class EventBus:
    """Thread-safe publish/subscribe.

    Delivery happens under the bus lock, so every subscriber sees events
    in one global publication order.
    """

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._subscribers: list[Callable[[Event], None]] = []

    def subscribe(self, callback: Callable[[Event], None]) -> Callable[[], None]:
        with self._lock:
            self._subscribers.append(callback)

        def unsubscribe() -> None:
            with self._lock:
                if callback in self._subscribers:
                    self._subscribers.remove(callback)

        return unsubscribe

    def publish(self, event: Event) -> None:
        with self._lock:
            for callback in list(self._subscribers):
                try:
                    callback(event)
                except Exception:
                    log.exception("event subscriber failed on %s", event.kind)


# ---------------------------------------------------------------------------
# evaluation with budget accounting


class Evaluator:
    """Scores specs on a fixed task list and counts task executions."""

    def __init__(
        self,
        tasks: Sequence[TaskRecord],
        executor: Callable[[Spec, TaskRecord], Any],
        clusters: Sequence[FailureCluster] | None = None,
        *,
        max_workers: int | None = None,
    ):
        if not tasks:
            raise ValueError("gate suite is empty")
        self.tasks = tuple(tasks)
        self.executor = executor
        self.clusters = tuple(clusters) if clusters is not None else None
        self.max_workers = max_workers
        self.executions = 0

    @classmethod
    def for_suite(cls, suite: Any, store: Any = None, **kwargs: Any) -> Evaluator:
        return cls(suite.tasks, suite.executor(store), suite.clusters, **kwargs)

    @property
    def cost(self) -> int:
        return len(self.tasks)

    def __call__(self, spec: Spec) -> GateScores:
        self.executions += len(self.tasks)
        return score(spec, self.tasks, self.executor, max_workers=self.max_workers)


# ---------------------------------------------------------------------------
# sessions


@dataclass
class HistoryEntry:
    seq: int
    decision: str  # accept | reject | invalid | no_proposal | proposer_error | duplicate
    parent_hash: str
    edit: Edit | None = None
    report: GateReport | None = None
    child_hash: str | None = None
    undo: tuple[FieldOp, ...] = ()
    merge_partner: str | None = None
    merge_slots: tuple[str, ...] = ()
    error: str | None = None
    proposals_left: int = 0
    executions_left: int = 0

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "proposal",
            "seq": self.seq,
            "decision": self.decision,
            "parent_hash": self.parent_hash,
            "child_hash": self.child_hash,
            "edit": self.edit.to_dict() if self.edit is not None else None,
            "report": self.report.to_dict() if self.report is not None else None,
            "undo": [op.to_dict() for op in self.undo],
            "merge_partner": self.merge_partner,
            "merge_slots": list(self.merge_slots),
            "error": self.error,
            "budget_remaining": {"proposals": self.proposals_left, "executions": self.executions_left},
        }


@dataclass
class SearchSession:
    session_id: str
    algorithm: str
    seed: int
    budget: Budget
    gate_config: GateConfig
    initial_spec: Spec
    final_spec: Spec
    initial_scores: GateScores | None = None
    final_scores: GateScores | None = None
    history: list[HistoryEntry] = field(default_factory=list)
    stagnation_counter: int = 0
    proposals_used: int = 0
    executions_used: int = 0
    stop_reason: str = ""
    population: list[Candidate] = field(default_factory=list)
    restarts: list[tuple[int, float]] = field(default_factory=list)

    @property
    def initial_spec_hash(self) -> str:
        return self.initial_spec.content_hash

    @property
    def final_spec_hash(self) -> str:
        return self.final_spec.content_hash

    @property
    def final_score(self) -> float:
        return self.final_scores.overall if self.final_scores is not None else -math.inf

    @property
    def accepted_edits(self) -> list[Edit]:
        return [h.edit for h in self.history if h.accepted and h.edit is not None]

    def header(self) -> dict[str, Any]:
        return {
            "type": "session",
            "session_id": self.session_id,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "budget": {
                "max_proposals": self.budget.max_proposals,
                "max_task_executions": self.budget.max_task_executions,
            },
            "gate": {"epsilon": self.gate_config.epsilon, "stagnation_k": self.gate_config.stagnation_k},
            "initial_spec": spec_to_dict(self.initial_spec),
            "initial_scores": _scores_dict(self.initial_scores),
        }

    def footer(self) -> dict[str, Any]:
        return {
            "type": "stop",
            "stop_reason": self.stop_reason,
            "final_spec_hash": self.final_spec_hash,
            "final_scores": _scores_dict(self.final_scores),
            "proposals_used": self.proposals_used,
            "executions_used": self.executions_used,
            "stagnation_counter": self.stagnation_counter,
        }

    def log_lines(self) -> list[str]:
        rows = [self.header(), *(h.to_dict() for h in self.history), self.footer()]
        return [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in rows]

    def write_log(self, path: Any) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")


def _scores_dict(s: GateScores | None) -> dict[str, Any] | None:
    if s is None:
        return None
    return {"per_cluster": dict(s.per_cluster), "overall": s.overall}


def _session_id(algorithm: str, seed: int, s0: Spec) -> str:
    return f"{algorithm}-{seed}-{s0.content_hash[:8]}"


class _Run:
    """Shared bookkeeping for one session: budget, events, history."""

    def __init__(self, algorithm: str, s0: Spec, evaluator: Evaluator, budget: Budget,
                 config: GateConfig, seed: int, bus: EventBus | None):
        self.evaluator = evaluator
        self.bus = bus
        self.exec_start = evaluator.executions
        self.session = SearchSession(
            session_id=_session_id(algorithm, seed, s0),
            algorithm=algorithm,
            seed=seed,
            budget=budget,
            gate_config=config,
            initial_spec=s0,
            final_spec=s0,
        )

    @property
    def executions(self) -> int:
        return self.evaluator.executions - self.exec_start

    def can_evaluate(self) -> bool:
        return self.executions + self.evaluator.cost <= self.session.budget.max_task_executions

    def can_propose(self) -> bool:
        return self.session.proposals_used < self.session.budget.max_proposals

    def evaluate(self, spec: Spec) -> GateScores:
        scores = self.evaluator(spec)
        self.session.executions_used = self.executions
        return scores

    def emit(self, kind: str, **data: Any) -> None:
        if self.bus is not None:
            self.bus.publish(Event(kind, self.session.session_id, len(self.session.history), data))

    def log(self, entry: HistoryEntry) -> None:
        s = self.session
        entry.proposals_left = s.budget.max_proposals - s.proposals_used
        entry.executions_left = s.budget.max_task_executions - self.executions
        s.history.append(entry)
        self.emit(entry.decision, edit_id=entry.edit.edit_id if entry.edit else None,
                  overall=entry.report.overall_after if entry.report else None)

    def stop(self, reason: str) -> SearchSession:
        self.session.stop_reason = reason
        self.session.executions_used = self.executions
        self.emit("stop", reason=reason, final_score=self.session.final_score)
        return self.session

    def start(self) -> GateScores | None:
        self.emit("session_start", algorithm=self.session.algorithm, seed=self.session.seed)
        if not self.can_evaluate():
            return None
        scores = self.evaluate(self.session.initial_spec)
        self.session.initial_scores = scores
        self.session.final_scores = scores
        return scores

    def next_proposal(self, proposer: Proposer, spec: Spec, diagnosis: Diagnosis) -> tuple[str, Any]:
        """('ok', Proposal) | ('exhausted', None) | ('none', None) | ('error', message)."""
        try:
            proposal = proposer.propose(spec, diagnosis)
        except ProposerExhausted:
            return "exhausted", None
        except Exception as exc:  # proposer faults cost a proposal, never the session
            return "error", f"{type(exc).__name__}: {exc}"
        if proposal is None:
            return "none", None
        s = self.session
        return "ok", stamp(proposal, getattr(proposer, "proposer_id", "proposer"), s.session_id,
                           s.proposals_used)


def _outside(edit: Edit, move_space: Iterable[str] | None) -> bool:
    return move_space is not None and not set(edit.primitives) <= set(move_space)


def run_greedy(
    s0: Spec,
    proposer: Proposer,
    evaluator: Evaluator,
    config: GateConfig = GateConfig(),
    budget: Budget = Budget(),
    *,
    seed: int = 0,
    move_space: Iterable[str] | None = None,
    bus: EventBus | None = None,
) -> SearchSession:
    """Diagnose, propose, apply, gate; commit every edit the gate accepts.

    Stops after ``config.stagnation_k`` consecutive proposals without an
    acceptance, when the proposer is exhausted, or when either budget
    dimension cannot cover another step.
    """
    run = _Run("greedy_gated", s0, evaluator, budget, config, seed, bus)
    session = run.session
    scores = run.start()
    if scores is None:
        return run.stop("budget_executions")
    spec = s0
    space = tuple(move_space) if move_space is not None else None
    while True:
        if session.stagnation_counter >= config.stagnation_k:
            return run.stop("stagnation")
        if not run.can_propose():
            return run.stop("budget_proposals")
        if not run.can_evaluate():
            return run.stop("budget_executions")
        diagnosis = diagnose(spec, scores, evaluator.clusters)
        status, payload = run.next_proposal(proposer, spec, diagnosis)
        if status == "exhausted":
            return run.stop("proposer_exhausted")
        session.proposals_used += 1
        seq = session.proposals_used
        if status != "ok":
            session.stagnation_counter += 1
            decision = "proposer_error" if status == "error" else "no_proposal"
            run.log(HistoryEntry(seq, decision, spec.content_hash, error=payload))
            continue
        edit = payload.edit
        try:
            if _outside(edit, space):
                raise EditError(f"edit touches {edit.primitives}, outside move space {space}")
            child = apply(spec, edit)
        except EditError as exc:
            session.stagnation_counter += 1
            run.log(HistoryEntry(seq, "invalid", spec.content_hash, edit=edit, error=str(exc)))
            continue
        after = run.evaluate(child)
        target = edit.target_cluster if edit.target_cluster in scores.per_cluster else None
        report = make_report(scores, after, target, config.epsilon)
        entry = HistoryEntry(seq, report.decision, spec.content_hash, edit=edit, report=report,
                             child_hash=child.content_hash, undo=undo_ops(spec, edit))
        if report.accepted:
            spec, scores = child, after
            session.final_spec, session.final_scores = spec, scores
            session.stagnation_counter = 0
        else:
            session.stagnation_counter += 1
            run.emit("stagnation", counter=session.stagnation_counter)
        run.log(entry)


def _overall_report(before: GateScores, after: GateScores) -> GateReport:
    improved = after.overall > before.overall
    regressions = tuple(
        (c, after.per_cluster[c] - before.per_cluster[c])
        for c in sorted(before.per_cluster)
        if after.per_cluster[c] < before.per_cluster[c]
    )
    return GateReport(
        per_cluster_before=dict(before.per_cluster),
        per_cluster_after=dict(after.per_cluster),
        overall_before=before.overall,
        overall_after=after.overall,
        target_cluster="",
        epsilon=0.0,
        decision="accept" if improved else "reject",
        regressions=regressions,
    )


def run_single_component(
    s0: Spec,
    evaluator: Evaluator,
    tau: str,
    budget: Budget = Budget(),
    *,
    proposer: Proposer | None = None,
    seed: int = 0,
    bus: EventBus | None = None,
) -> SearchSession:
    """Edit one primitive only; keep an edit iff the overall score improves."""
    if tau not in EDITABLE_PRIMITIVES:
        raise ValueError(f"not an editable primitive: {tau!r}")
    run = _Run("single_component", s0, evaluator, budget, GateConfig(), seed, bus)
    session = run.session
    if proposer is None:
        proposer = TemplateRandomProposer((tau,), seed)
    scores = run.start()
    if scores is None:
        return run.stop("budget_executions")
    spec = s0
    while True:
        if not run.can_propose():
            return run.stop("budget_proposals")
        if not run.can_evaluate():
            return run.stop("budget_executions")
        if not enumerate_catalog(spec, (tau,)):
            return run.stop("empty_catalog")
        diagnosis = diagnose(spec, scores, evaluator.clusters)
        status, payload = run.next_proposal(proposer, spec, diagnosis)
        if status == "exhausted":
            return run.stop("proposer_exhausted")
        session.proposals_used += 1
        seq = session.proposals_used
        if status != "ok":
            decision = "proposer_error" if status == "error" else "no_proposal"
            run.log(HistoryEntry(seq, decision, spec.content_hash, error=payload))
            continue
        edit = payload.edit
        try:
            if _outside(edit, (tau,)):
                raise EditError(f"edit touches {edit.primitives}, restricted to {tau}")
            child = apply(spec, edit)
        except EditError as exc:
            run.log(HistoryEntry(seq, "invalid", spec.content_hash, edit=edit, error=str(exc)))
            continue
        after = run.evaluate(child)
        report = _overall_report(scores, after)
        entry = HistoryEntry(seq, report.decision, spec.content_hash, edit=edit, report=report,
                             child_hash=child.content_hash, undo=undo_ops(spec, edit))
        if report.accepted:
            spec, scores = child, after
            session.final_spec, session.final_scores = spec, scores
        run.log(entry)


# ---------------------------------------------------------------------------
# evolutionary


@dataclass
class Candidate:
    index: int
    spec: Spec
    scores: GateScores
    on_frontier: bool = True


def cluster_vectors_frontier(candidates: Sequence[Candidate]) -> list[bool]:
    clusters = sorted(candidates[0].scores.per_cluster) if candidates else []
    points = [ParetoPoint(str(c.index), dict(c.scores.per_cluster)) for c in candidates]
    return pareto_mask(points, [(name, "max") for name in clusters])


def merge_specs(a: Spec, b: Spec, rng: random.Random) -> tuple[Spec, tuple[str, ...]]:
    """Uniform per-slot crossover over the four editable slots.

    Returns the child and the slots it took from ``b``.
    """
    taken = tuple(p for p in EDITABLE_PRIMITIVES if rng.random() < 0.5)
    return _crossover(a, b, taken), taken


def _crossover(a: Spec, b: Spec, taken: Iterable[str]) -> Spec:
    data = spec_to_dict(a)
    other = spec_to_dict(b)
    for slot in taken:
        data[slot] = other[slot]
    data["version"] = max(a.version, b.version) + 1
    return spec_from_dict(data)


def run_evolutionary(
    s0: Spec,
    reflector: Proposer,
    evaluator: Evaluator,
    budget: Budget = Budget(),
    *,
    seed: int = 0,
    merge_probability: float = MERGE_PROBABILITY,
    bus: EventBus | None = None,
) -> SearchSession:
    """Pareto-population search over per-cluster score vectors.

    Each step mutates one slot of a frontier member, sometimes crosses the
    result with another frontier member, and inserts it into the
    population. The best member by overall score (earliest on ties) is
    returned as the final spec.
    """
    run = _Run("evolutionary", s0, evaluator, budget, GateConfig(), seed, bus)
    session = run.session
    rng = random.Random(f"evo:{seed}")
    scores = run.start()
    if scores is None:
        return run.stop("budget_executions")
    population = [Candidate(0, s0, scores)]
    by_hash = {s0.content_hash: population[0]}
    session.population = population

    def finish(reason: str) -> SearchSession:
        best = max(population, key=lambda c: (c.scores.overall, -c.index))
        session.final_spec, session.final_scores = best.spec, best.scores
        return run.stop(reason)

    while True:
        if not run.can_propose():
            return finish("budget_proposals")
        if not run.can_evaluate():
            return finish("budget_executions")
        frontier = [c for c in population if c.on_frontier]
        parent = rng.choice(frontier)
        diagnosis = diagnose(parent.spec, parent.scores, evaluator.clusters)
        status, payload = run.next_proposal(reflector, parent.spec, diagnosis)
        if status == "exhausted":
            return finish("proposer_exhausted")
        session.proposals_used += 1
        seq = session.proposals_used
        # the merge draw happens every step so the stream does not depend on outcomes
        do_merge = rng.random() < merge_probability
        partners = [c for c in frontier if c is not parent]
        partner = rng.choice(partners) if do_merge and partners else None
        mask_rng = random.Random(f"evo-merge:{seed}:{seq}")
        parent_hash = parent.spec.content_hash
        if status != "ok":
            decision = "proposer_error" if status == "error" else "no_proposal"
            run.log(HistoryEntry(seq, decision, parent_hash, error=payload))
            continue
        edit = payload.edit
        try:
            if len(edit.primitives) != 1:
                raise EditError(f"reflective mutation must touch one primitive, got {edit.primitives}")
            child = apply(parent.spec, edit)
            taken: tuple[str, ...] = ()
            if partner is not None:
                child, taken = merge_specs(child, partner.spec, mask_rng)
        except EditError as exc:
            run.log(HistoryEntry(seq, "invalid", parent_hash, edit=edit, error=str(exc)))
            continue
        partner_hash = partner.spec.content_hash if partner is not None else None
        if child.content_hash in by_hash:
            run.log(HistoryEntry(seq, "duplicate", parent_hash, edit=edit, child_hash=child.content_hash,
                                 merge_partner=partner_hash, merge_slots=taken))
            continue
        after = run.evaluate(child)
        report = make_report(parent.scores, after,
                             edit.target_cluster if edit.target_cluster in after.per_cluster else None, 0.0)
        cand = Candidate(len(population), child, after)
        population.append(cand)
        by_hash[child.content_hash] = cand
        for c, flag in zip(population, cluster_vectors_frontier(population)):
            c.on_frontier = flag
        run.log(HistoryEntry(seq, "accept" if cand.on_frontier else "reject", parent_hash, edit=edit,
                             report=report, child_hash=child.content_hash, undo=undo_ops(parent.spec, edit),
                             merge_partner=partner_hash, merge_slots=taken))


# ---------------------------------------------------------------------------
# restarts


def best_of_n(runner: Callable[[int], SearchSession], n: int, base_seed: int = 0) -> SearchSession:
    """Run seeds ``base_seed .. base_seed+n-1``; keep the best final score.

    Ties go to the lowest seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    best: SearchSession | None = None
    results = []
    for seed in range(base_seed, base_seed + n):
        session = runner(seed)
        results.append((seed, session.final_score))
        if best is None or session.final_score > best.final_score:
            best = session
    assert best is not None
    best.restarts = results
    return best


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ReplayResult:
    checked: int
    mismatches: tuple[tuple[int, str, str], ...]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def read_log(lines: Iterable[str]) -> tuple[dict[str, Any], list[dict[str, Any]], dict[str, Any] | None]:
    rows = [json.loads(line) for line in lines if line.strip()]
    if not rows or rows[0].get("type") != "session":
        raise ValueError("session log must start with a session header")
    entries = [r for r in rows[1:] if r.get("type") == "proposal"]
    footer = next((r for r in rows if r.get("type") == "stop"), None)
    return rows[0], entries, footer


def replay_session(lines: Iterable[str], evaluator: Evaluator) -> ReplayResult:
    """Re-run every logged edit through apply and the gate; list disagreements.

    A mismatch is ``(seq, logged decision, replayed decision)``.
    """
    header, entries, _ = read_log(lines)
    algorithm = header["algorithm"]
    epsilon = float(header["gate"]["epsilon"])
    spec = spec_from_dict(header["initial_spec"])
    scores = evaluator(spec)
    specs = {spec.content_hash: (spec, scores)}
    population = [Candidate(0, spec, scores)]
    mismatches = []
    checked = 0
    for row in entries:
        if row["edit"] is None:
            continue
        checked += 1
        logged = row["decision"]
        edit = Edit.from_dict(row["edit"])
        parent, parent_scores = specs[row["parent_hash"]] if algorithm == "evolutionary" else (spec, scores)
        try:
            if algorithm == "evolutionary" and len(edit.primitives) != 1:
                raise EditError("multi-primitive mutation")
            child = apply(parent, edit)
            if row.get("merge_partner"):
                child = _crossover(child, specs[row["merge_partner"]][0], row["merge_slots"])
        except EditError:
            replayed = "invalid"
        else:
            if row.get("child_hash") and child.content_hash != row["child_hash"]:
                mismatches.append((row["seq"], logged, "child hash differs"))
                continue
            if algorithm == "evolutionary" and child.content_hash in specs:
                replayed = "duplicate"
            else:
                after = evaluator(child)
                if algorithm == "greedy_gated":
                    target = edit.target_cluster if edit.target_cluster in scores.per_cluster else None
                    replayed = make_report(scores, after, target, epsilon).decision
                elif algorithm == "single_component":
                    replayed = "accept" if after.overall > scores.overall else "reject"
                else:
                    cand = Candidate(len(population), child, after)
                    population.append(cand)
                    specs[child.content_hash] = (child, after)
                    replayed = "accept" if cluster_vectors_frontier(population)[-1] else "reject"
                if replayed == "accept" and algorithm != "evolutionary":
                    spec, scores = child, after
        if replayed != logged:
            mismatches.append((row["seq"], logged, replayed))
    return ReplayResult(checked, tuple(mismatches))
