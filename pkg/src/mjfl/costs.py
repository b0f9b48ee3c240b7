"""Round cost: straggler time, data-fairness variance, and their weighted sum.

``combined = alpha * time_cost / time_norm + beta * fairness_cost`` per job and
round; the cross-job total is the sum of every job's latest combined cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .core import FrequencyMatrix, JobId, SchedulingPlan
from .devices import TimeSample
from .errors import IncompleteRoundError, InvariantViolation


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise InvariantViolation("cost weights must be non-negative with alpha + beta > 0")


@dataclass(frozen=True)
class RoundCost:
    job: JobId
    round: int
    time_cost: float
    fairness_cost: float
    combined: float

    @classmethod
    def idle(cls, job: JobId) -> RoundCost:
        """Placeholder for a job that has not completed a round yet."""
        return cls(job, 0, 0.0, 0.0, 0.0)


def time_cost(plan: SchedulingPlan, samples: Iterable[TimeSample]) -> float:
    """Round time is set by the slowest scheduled device."""
    by_device = {s.device: s.t for s in samples}
    missing = [k for k in plan.devices if k not in by_device]
    if missing:
        raise IncompleteRoundError(f"no time sample for scheduled devices {missing}")
    return max(by_device[k] for k in plan.devices)


def variance(counts: np.ndarray) -> float:
    """Population variance (divide by the number of devices)."""
    c = np.asarray(counts, dtype=float)
    return float(np.mean((c - c.mean()) ** 2))


def fairness_cost(freq: FrequencyMatrix, job: JobId, prospective: SchedulingPlan) -> float:
    """Variance of the job's counts after adding the prospective plan."""
    counts = freq.row(job).astype(float)
    counts[list(prospective.devices)] += 1.0
    return variance(counts)


def combine(time: float, fairness: float, weights: CostWeights, time_norm: float) -> float:
    return weights.alpha * (time / time_norm) + weights.beta * fairness


def round_cost(
    plan: SchedulingPlan,
    samples: Iterable[TimeSample],
    freq: FrequencyMatrix,
    weights: CostWeights,
    time_norm: float,
) -> RoundCost:
    """Cost of executing ``plan``; ``freq`` holds counts before this round."""
    t = time_cost(plan, samples)
    f = fairness_cost(freq, plan.job, plan)
    return RoundCost(plan.job, plan.round, t, f, combine(t, f, weights, time_norm))


def total_cost(costs: Mapping[JobId, RoundCost], num_jobs: int | None = None) -> float:
    """Sum of combined costs over all jobs.

    With ``num_jobs`` given, every job ``0..num_jobs-1`` must have an entry.
    """
    if num_jobs is not None:
        missing = [m for m in range(num_jobs) if m not in costs]
        if missing:
            raise InvariantViolation(f"total cost needs an entry for jobs {missing}")
    return float(sum(c.combined for c in costs.values()))


def estimate_costs(
    bits: np.ndarray,
    device_times: np.ndarray,
    counts: np.ndarray,
    weights: CostWeights,
    time_norm: float,
    others: float = 0.0,
) -> np.ndarray:
    """Total cost of many candidate plans at once, from per-device time estimates.

    Args:
        bits: ``(n, K)`` 0/1 candidate encodings.
        device_times: ``(K,)`` per-device time used for the straggler max.
        counts: ``(K,)`` frequency row of the job before the candidate runs.
        weights: Cost weights.
        time_norm: Divisor applied to the time term.
        others: Sum of the other jobs' latest combined costs.
    """
    bits = np.atleast_2d(bits).astype(bool)
    times = np.where(bits, device_times[None, :], -np.inf).max(axis=1)
    c = counts[None, :].astype(float) + bits
    fair = ((c - c.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    return weights.alpha * times / time_norm + weights.beta * fair + others
