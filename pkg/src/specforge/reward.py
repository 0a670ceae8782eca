"""Composite reward over accuracy and z-normalized energy, latency and cost."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from math import fsum

from .spec_model import RewardWeights
from .telemetry import TelemetryRecord

DEFAULT_WEIGHTS = RewardWeights()
ACCURACY_ONLY = RewardWeights(1.0, 0.0, 0.0, 0.0)

QUANTITIES = ("energy", "latency", "cost")


@dataclass(frozen=True)
class ColumnStats:
    mean: float
    std: float


@dataclass(frozen=True)
class NormalizationStats:
    energy: ColumnStats
    latency: ColumnStats
    cost: ColumnStats

    def __getitem__(self, quantity: str) -> ColumnStats:
        if quantity not in QUANTITIES:
            raise KeyError(quantity)
        return getattr(self, quantity)


def column_stats(values: Sequence[float]) -> ColumnStats:
    """Population mean and standard deviation."""
    if not values:
        raise ValueError("cannot fit statistics on an empty column")
    n = len(values)
    if min(values) == max(values):
        # rounding in the mean would otherwise leave a spurious tiny spread
        return ColumnStats(float(values[0]), 0.0)
    mean = fsum(values) / n
    var = fsum((x - mean) ** 2 for x in values) / n
    return ColumnStats(mean, math.sqrt(var))


def fit_normalization(records: Iterable[TelemetryRecord]) -> NormalizationStats:
    records = list(records)
    if not records:
        raise ValueError("cannot fit normalization on zero records")
    return NormalizationStats(
        energy=column_stats([r.energy for r in records]),
        latency=column_stats([r.latency for r in records]),
        cost=column_stats([r.cost for r in records]),
    )


def normalize(x: float, stats: ColumnStats) -> float:
    if stats.std == 0.0:
        return 0.0
    return (x - stats.mean) / stats.std


def composite_reward(
    r_acc: float, e_hat: float, l_hat: float, c_hat: float, weights: RewardWeights = DEFAULT_WEIGHTS
) -> float:
    w = weights
    return w.alpha * r_acc - w.beta * e_hat - w.gamma * l_hat - w.delta * c_hat


def reward_records(
    records: Sequence[TelemetryRecord], weights: RewardWeights = DEFAULT_WEIGHTS
) -> list[float]:
    """Score every record, normalizing within the given set."""
    stats = fit_normalization(records)
    return [
        composite_reward(
            r.accuracy,
            normalize(r.energy, stats.energy),
            normalize(r.latency, stats.latency),
            normalize(r.cost, stats.cost),
            weights,
        )
        for r in records
    ]
