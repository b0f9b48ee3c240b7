"""Scheduler contract: what a scheduler sees each round and what it must return."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .core import FrequencyMatrix, JobId, JobSpec, SchedulingPlan
from .costs import CostWeights, RoundCost, estimate_costs
from .devices import DeviceProfile, expected_times
from .errors import SchedulerContractError


@dataclass
class SchedulerContext:
    """Inputs for choosing job ``job.job``'s plan at ``round``.

    ``available`` is every device not currently occupied by any job, in
    ascending order. ``other_job_costs`` holds the latest executed round cost
    of every other job (an idle zero cost before a job's first round).
    """

    job: JobSpec
    round: int
    available: tuple[int, ...]
    freq: FrequencyMatrix
    profiles: Sequence[DeviceProfile]
    weights: CostWeights
    other_job_costs: Mapping[JobId, RoundCost] = field(default_factory=dict)
    time_norm: float | None = None
    size: int | None = None  # plan size override (contention shrink mode)

    def __post_init__(self):
        self.available = tuple(sorted(int(k) for k in self.available))
        if self.time_norm is None:
            self.time_norm = float(self.expected_times.max())
        if len(self.available) < self.n:
            raise SchedulerContractError(
                f"job {self.job.job}: {len(self.available)} available devices, need {self.n}"
            )

    @property
    def num_devices(self) -> int:
        return len(self.profiles)

    @cached_property
    def n(self) -> int:
        return self.size if self.size is not None else self.job.n_devices(self.num_devices)

    @cached_property
    def expected_times(self) -> np.ndarray:
        return expected_times(self.profiles, self.job)

    @cached_property
    def others_total(self) -> float:
        return float(sum(c.combined for m, c in self.other_job_costs.items() if m != self.job.job))

    @cached_property
    def counts(self) -> np.ndarray:
        return self.freq.row(self.job.job)

    def estimate_costs(self, bits: np.ndarray) -> np.ndarray:
        """Estimated total cost of candidate encodings, using expected device times."""
        return estimate_costs(
            bits, self.expected_times, self.counts, self.weights, self.time_norm, self.others_total
        )

    def plan(self, devices) -> SchedulingPlan:
        return SchedulingPlan(self.job.job, self.round, tuple(int(k) for k in devices))

    def random_plans(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """``(count, K)`` encodings of uniformly random size-n plans over available devices."""
        avail = np.asarray(self.available)
        # argsort of uniform keys gives an independent permutation per row
        keys = rng.random((count, len(avail)))
        picks = avail[np.argsort(keys, axis=1)[:, : self.n]]
        bits = np.zeros((count, self.num_devices), dtype=np.int8)
        np.put_along_axis(bits, picks, 1, axis=1)
        return bits


def check_plan(plan: SchedulingPlan, ctx: SchedulerContext) -> None:
    """Raise if ``plan`` breaks the scheduler contract for ``ctx``."""
    if plan.job != ctx.job.job:
        raise SchedulerContractError(f"plan is for job {plan.job}, expected {ctx.job.job}")
    if len(plan.devices) != ctx.n:
        raise SchedulerContractError(
            f"job {ctx.job.job}: plan has {len(plan.devices)} devices, expected {ctx.n}"
        )
    unavailable = set(plan.devices) - set(ctx.available)
    if unavailable:
        raise SchedulerContractError(
            f"job {ctx.job.job}: plan uses unavailable devices {sorted(unavailable)}"
        )


class Scheduler:
    """Base class. Subclasses implement :meth:`schedule`; :meth:`observe` is the feedback hook."""

    name = "base"

    def schedule(self, ctx: SchedulerContext) -> SchedulingPlan:
        raise NotImplementedError

    def observe(self, ctx: SchedulerContext, plan: SchedulingPlan, total_cost: float,
                round_cost: RoundCost | None = None) -> None:
        """Called once the plan has run, with the realized total and per-job cost."""
