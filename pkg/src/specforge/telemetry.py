"""Per-query telemetry, per-spec summaries, Pareto frontiers and amortization."""

from __future__ import annotations

import json
import math
import os
import threading
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from math import fsum
from pathlib import Path
from typing import Any

MAXIMIZE = "max"
MINIMIZE = "min"

DEFAULT_OBJECTIVES = (
    ("accuracy", MAXIMIZE),
    ("cost", MINIMIZE),
    ("latency", MINIMIZE),
    ("energy", MINIMIZE),
)


class TelemetryError(ValueError):
    pass


@dataclass(frozen=True)
class MeterReading:
    energy: float = 0.0
    latency: float = 0.0
    cost: float = 0.0
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass(frozen=True)
class TelemetryRecord:
    query_id: str
    spec_hash: str
    accuracy: float
    energy: float
    latency: float
    cost: float
    input_tokens: int = 0
    output_tokens: int = 0
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not self.latency > 0:
            raise TelemetryError(f"latency must be positive, got {self.latency!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise TelemetryError(f"accuracy must lie in [0, 1], got {self.accuracy!r}")
        if self.energy < 0 or self.cost < 0:
            raise TelemetryError("energy and cost must be nonnegative")
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise TelemetryError("token counts must be nonnegative")

    @property
    def power(self) -> float:
        return self.energy / self.latency

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "spec_hash": self.spec_hash,
            "accuracy": self.accuracy,
            "energy": self.energy,
            "latency": self.latency,
            "cost": self.cost,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TelemetryRecord:
        # power is derived; a stored value, if any, is ignored
        return cls(
            query_id=str(data["query_id"]),
            spec_hash=str(data["spec_hash"]),
            accuracy=float(data["accuracy"]),
            energy=float(data["energy"]),
            latency=float(data["latency"]),
            cost=float(data["cost"]),
            input_tokens=int(data.get("input_tokens", 0)),
            output_tokens=int(data.get("output_tokens", 0)),
            timestamp=float(data.get("timestamp", 0.0)),
        )


class TelemetryStore:
    """Append-only record store, optionally backed by a JSONL file.

    Appends are serialized under a lock and each line is written with a
    single ``write`` call, so concurrent gate workers never interleave.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._records: list[TelemetryRecord] = []
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._records.append(TelemetryRecord.from_dict(json.loads(line)))

    def append(self, rec: TelemetryRecord) -> None:
        line = json.dumps(rec.to_dict(), sort_keys=True) + "\n"
        with self._lock:
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
            self._records.append(rec)

    def snapshot(self, spec_hash: str | None = None) -> list[TelemetryRecord]:
        with self._lock:
            records = list(self._records)
        if spec_hash is None:
            return records
        return [r for r in records if r.spec_hash == spec_hash]

    def spec_hashes(self) -> list[str]:
        return list(dict.fromkeys(r.spec_hash for r in self.snapshot()))

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


def record(
    store: TelemetryStore | None,
    query_id: str,
    spec_hash: str,
    accuracy: float,
    reading: MeterReading,
    *,
    local: bool = False,
    timestamp: float | None = None,
) -> TelemetryRecord:
    """Build a record from a query outcome and meter readings and persist it.

    Local inference carries no marginal API cost.
    """
    rec = TelemetryRecord(
        query_id=query_id,
        spec_hash=spec_hash,
        accuracy=accuracy,
        energy=reading.energy,
        latency=reading.latency,
        cost=0.0 if local else reading.cost,
        input_tokens=reading.input_tokens,
        output_tokens=reading.output_tokens,
        timestamp=time.time() if timestamp is None else timestamp,
    )
    if store is not None:
        store.append(rec)
    return rec


@dataclass(frozen=True)
class SpecSummary:
    spec_hash: str
    n_queries: int
    mean_accuracy: float
    mean_energy: float
    total_energy: float
    mean_latency: float
    mean_power: float
    mean_cost: float
    total_cost: float

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def summarize(records: Sequence[TelemetryRecord], spec_hash: str) -> SpecSummary:
    if not records:
        raise TelemetryError(f"no telemetry records for spec {spec_hash}")
    n = len(records)
    total_energy = fsum(r.energy for r in records)
    total_cost = fsum(r.cost for r in records)
    return SpecSummary(
        spec_hash=spec_hash,
        n_queries=n,
        mean_accuracy=fsum(r.accuracy for r in records) / n,
        mean_energy=total_energy / n,
        total_energy=total_energy,
        mean_latency=fsum(r.latency for r in records) / n,
        mean_power=fsum(r.power for r in records) / n,
        mean_cost=total_cost / n,
        total_cost=total_cost,
    )


def aggregate(store: TelemetryStore, spec_hash: str) -> SpecSummary:
    return summarize(store.snapshot(spec_hash), spec_hash)


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    values: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, v in self.values.items():
            if not math.isfinite(v):
                raise TelemetryError(f"point {self.label!r}: objective {name} is not finite")


def _oriented(point: ParetoPoint, objectives: Sequence[tuple[str, str]]) -> tuple[float, ...]:
    # every coordinate turned into "larger is better"
    out = []
    for name, direction in objectives:
        if direction not in (MAXIMIZE, MINIMIZE):
            raise TelemetryError(f"objective direction must be 'max' or 'min', got {direction!r}")
        v = point.values[name]
        out.append(v if direction == MAXIMIZE else -v)
    return tuple(out)


def pareto_mask(
    points: Sequence[ParetoPoint], objectives: Sequence[tuple[str, str]] = DEFAULT_OBJECTIVES
) -> list[bool]:
    """Non-dominated flags, aligned with ``points``.

    Points are visited in decreasing lexicographic order of their
    objective vectors; a dominator always sorts strictly earlier, so each
    point only needs checking against the frontier found so far.
    """
    vectors = [_oriented(p, objectives) for p in points]
    order = sorted(range(len(points)), key=lambda i: vectors[i], reverse=True)
    frontier: list[tuple[float, ...]] = []
    mask = [False] * len(points)
    for i in order:
        v = vectors[i]
        dominated = any(
            all(a >= b for a, b in zip(f, v)) and any(a > b for a, b in zip(f, v)) for f in frontier
        )
        if not dominated:
            frontier.append(v)
            mask[i] = True
    return mask


def pareto_frontier(
    points: Sequence[ParetoPoint], objectives: Sequence[tuple[str, str]] = DEFAULT_OBJECTIVES
) -> list[ParetoPoint]:
    """The non-dominated points, in input order. Ties are all kept."""
    return [p for p, keep in zip(points, pareto_mask(points, objectives)) if keep]


def summary_point(label: str, summary: SpecSummary) -> ParetoPoint:
    return ParetoPoint(
        label,
        {
            "accuracy": summary.mean_accuracy,
            "cost": summary.mean_cost,
            "latency": summary.mean_latency,
            "energy": summary.mean_energy,
        },
    )


@dataclass(frozen=True)
class Amortization:
    total_queries: int
    amortized_per_query: float
    ratio: float
    direction: str

    def format(self) -> str:
        ratio = "∞" if math.isinf(self.ratio) else f"{self.ratio:.1f}"
        return f"{self.amortized_per_query:.4f} / {ratio}× {self.direction}"


def amortize(
    search_cost: float, queries_per_day: int, days: int, cloud_cost_per_query: float
) -> Amortization:
    """One-time search cost spread over a deployment's lifetime queries."""
    total = queries_per_day * days
    if total <= 0:
        raise TelemetryError("total query count must be positive")
    per_query = search_cost / total
    if per_query > cloud_cost_per_query:
        ratio = per_query / cloud_cost_per_query if cloud_cost_per_query else math.inf
        return Amortization(total, per_query, ratio, "more expensive")
    ratio = cloud_cost_per_query / per_query if per_query else math.inf
    return Amortization(total, per_query, ratio, "cheaper")


def load_records(lines: Iterable[str]) -> list[TelemetryRecord]:
    return [TelemetryRecord.from_dict(json.loads(line)) for line in lines if line.strip()]
