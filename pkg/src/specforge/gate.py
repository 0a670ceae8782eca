"""Held-out gate: per-cluster scoring and the edit acceptance rule."""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import fsum
from typing import Any

from .spec_model import Spec

log = logging.getLogger(__name__)


class GateError(ValueError):
    pass


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    cluster_id: str
    query: Mapping[str, Any] = field(default_factory=dict)
    expected: Mapping[str, Any] = field(default_factory=dict)
    tags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "cluster_id": self.cluster_id,
            "query": dict(self.query),
            "expected": dict(self.expected),
            "tags": list(self.tags),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], cluster_id: str | None = None) -> TaskRecord:
        return cls(
            task_id=str(data["task_id"]),
            cluster_id=str(cluster_id if cluster_id is not None else data["cluster_id"]),
            query=dict(data.get("query", {})),
            expected=dict(data.get("expected", {})),
            tags=tuple(data.get("tags", ())),
        )


@dataclass(frozen=True)
class FailureCluster:
    cluster_id: str
    description: str
    task_ids: tuple[str, ...]
    student_success_rate: float = 0.0
    teacher_success_rate: float = 1.0

    def __post_init__(self) -> None:
        if not self.task_ids:
            raise GateError(f"cluster {self.cluster_id!r} has no member tasks")
        for name in ("student_success_rate", "teacher_success_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise GateError(f"cluster {self.cluster_id!r}: {name} outside [0, 1]")


@dataclass(frozen=True)
class TaskOutcome:
    """What one task execution produced.

    ``success`` may be graded; ``signature`` is empty on full success.
    """

    task_id: str
    cluster_id: str
    success: float
    signature: str = ""
    trace: str = ""
    error: str | None = None
    telemetry: Mapping[str, float] | None = None


# An executor runs one task under a spec. It may return a bare success
# value or a TaskOutcome; exceptions score the task 0.
Executor = Callable[[Spec, TaskRecord], "float | TaskOutcome"]


@dataclass(frozen=True)
class GateScores:
    per_cluster: Mapping[str, float]
    overall: float
    outcomes: tuple[TaskOutcome, ...] = ()

    @property
    def failures(self) -> tuple[TaskOutcome, ...]:
        return tuple(o for o in self.outcomes if o.error is not None)


def _run_one(spec: Spec, task: TaskRecord, executor: Executor) -> TaskOutcome:
    try:
        result = executor(spec, task)
    except Exception as exc:  # a crashing candidate scores 0 on that task
        log.debug("task %s failed under %s: %s", task.task_id, spec.content_hash[:12], exc)
        return TaskOutcome(task.task_id, task.cluster_id, 0.0, signature="executor_error", error=repr(exc))
    if isinstance(result, TaskOutcome):
        outcome = result
    else:
        value = float(result)
        outcome = TaskOutcome(task.task_id, task.cluster_id, value, signature="" if value >= 1.0 else "failed")
    if not 0.0 <= outcome.success <= 1.0:
        return TaskOutcome(task.task_id, task.cluster_id, 0.0, signature="executor_error",
                           error=f"success {outcome.success!r} outside [0, 1]")
    return outcome


def score(
    spec: Spec,
    tasks: Sequence[TaskRecord],
    executor: Executor,
    *,
    max_workers: int | None = None,
) -> GateScores:
    """Mean success per cluster and task-weighted overall mean.

    Tasks may run on a thread pool; outcomes are reduced in task_id order
    so the result never depends on scheduling.
    """
    if not tasks:
        raise GateError("cannot score an empty task list")
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(lambda t: _run_one(spec, t, executor), tasks))
    else:
        outcomes = [_run_one(spec, t, executor) for t in tasks]
    outcomes.sort(key=lambda o: o.task_id)

    by_cluster: dict[str, list[float]] = {}
    for o in outcomes:
        by_cluster.setdefault(o.cluster_id, []).append(o.success)
    per_cluster = {c: fsum(v) / len(v) for c, v in sorted(by_cluster.items())}
    overall = fsum(o.success for o in outcomes) / len(outcomes)
    return GateScores(per_cluster, overall, tuple(outcomes))


def gate_ok(
    before: Mapping[str, float], after: Mapping[str, float], target: str, epsilon: float
) -> bool:
    """True iff the target cluster strictly improves and no other cluster
    drops by more than ``epsilon``."""
    if target not in before or target not in after:
        raise GateError(f"target cluster {target!r} missing from score map")
    if set(before) != set(after):
        raise GateError("before/after score maps cover different clusters")
    if not after[target] > before[target]:
        return False
    return all(after[c] >= before[c] - epsilon for c in before if c != target)


def pick_target(before: Mapping[str, float], after: Mapping[str, float]) -> str:
    """Cluster with the largest gain (first in sorted order on ties).

    Used when an edit arrives without a declared target.
    """
    return max(sorted(before), key=lambda c: after[c] - before[c])


@dataclass(frozen=True)
class GateReport:
    per_cluster_before: Mapping[str, float]
    per_cluster_after: Mapping[str, float]
    overall_before: float
    overall_after: float
    target_cluster: str
    epsilon: float
    decision: str
    regressions: tuple[tuple[str, float], ...]

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_cluster_before": dict(self.per_cluster_before),
            "per_cluster_after": dict(self.per_cluster_after),
            "overall_before": self.overall_before,
            "overall_after": self.overall_after,
            "target_cluster": self.target_cluster,
            "epsilon": self.epsilon,
            "decision": self.decision,
            "regressions": [[c, d] for c, d in self.regressions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GateReport:
        return cls(
            per_cluster_before=dict(data["per_cluster_before"]),
            per_cluster_after=dict(data["per_cluster_after"]),
            overall_before=float(data["overall_before"]),
            overall_after=float(data["overall_after"]),
            target_cluster=str(data["target_cluster"]),
            epsilon=float(data["epsilon"]),
            decision=str(data["decision"]),
            regressions=tuple((str(c), float(d)) for c, d in data["regressions"]),
        )


def make_report(before: GateScores, after: GateScores, target: str | None, epsilon: float) -> GateReport:
    if target is None:
        target = pick_target(before.per_cluster, after.per_cluster)
    ok = gate_ok(before.per_cluster, after.per_cluster, target, epsilon)
    regressions = tuple(
        (c, after.per_cluster[c] - before.per_cluster[c])
        for c in sorted(before.per_cluster)
        if c != target and after.per_cluster[c] < before.per_cluster[c]
    )
    return GateReport(
        per_cluster_before=dict(before.per_cluster),
        per_cluster_after=dict(after.per_cluster),
        overall_before=before.overall,
        overall_after=after.overall,
        target_cluster=target,
        epsilon=epsilon,
        decision="accept" if ok else "reject",
        regressions=regressions,
    )


def cluster_by_signature(
    outcomes: Iterable[tuple[TaskRecord, str] | tuple[TaskRecord, str, float]],
    teacher_success: Mapping[str, float] | None = None,
) -> list[FailureCluster]:
    """Group failed tasks by failure signature, in order of first appearance.

    Each outcome is ``(task, signature)`` or ``(task, signature, success)``;
    a missing success value means 0 for a failure. Teacher rates come from
    ``teacher_success`` keyed by task_id and default to 1.0.
    """
    groups: dict[str, list[tuple[str, float]]] = {}
    for item in outcomes:
        task, signature = item[0], item[1]
        if not signature:
            continue
        success = float(item[2]) if len(item) > 2 else 0.0
        groups.setdefault(signature, []).append((task.task_id, success))
    clusters = []
    for signature, members in groups.items():
        ids = tuple(t for t, _ in members)
        student = fsum(s for _, s in members) / len(members)
        if teacher_success:
            teacher = fsum(teacher_success.get(t, 1.0) for t in ids) / len(ids)
        else:
            teacher = 1.0
        clusters.append(FailureCluster(signature, signature, ids, student, teacher))
    return clusters
