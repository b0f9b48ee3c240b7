"""Event-driven multi-job FL simulation.

All jobs start at time zero and run asynchronously on one simulated clock.
A round asks the scheduler for a plan over the currently free devices, draws
each device's time, keeps those devices busy until they finish, and completes
when the slowest one is done. Costs, frequency counts and surrogate loss are
updated at completion, the realized total cost is fed back to the scheduler,
and the job's next round starts immediately unless it is finished.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import baselines, bods, rlds
from .config import ExperimentConfig, build_profiles
from .core import FrequencyMatrix, SchedulingPlan, update_frequency
from .costs import RoundCost, combine, variance
from .devices import DeviceProfile, expected_times, sample_times
from .errors import SchedulerContractError
from .scheduling import Scheduler, SchedulerContext, check_plan
from .surrogate import JobProgress, advance

logger = logging.getLogger(__name__)

# stream ids under the experiment seed
STREAM_DEVICES, STREAM_TIMES, STREAM_SCHEDULER, STREAM_POLICY = 0, 1, 2, 3

# at equal times: releases, then completions, then round starts
_RELEASE, _COMPLETE, _START = 0, 1, 2


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class RoundRecord:
    job: int
    round: int
    start_time: float
    end_time: float
    devices: tuple[int, ...]
    device_times: tuple[float, ...]
    time_cost: float
    fairness_cost: float
    combined_cost: float
    total_cost: float
    loss: float

    def occupation(self, release: str = "per_device") -> list[tuple[int, float, float]]:
        """``(device, busy_from, busy_until)`` intervals of this round."""
        if release == "at_round_end":
            return [(k, self.start_time, self.end_time) for k in self.devices]
        return [(k, self.start_time, self.start_time + t) for k, t in zip(self.devices, self.device_times)]


@dataclass
class SimulationTrace:
    records: list[RoundRecord]
    jobs: list
    profiles: list[DeviceProfile]
    time_norms: list[float]
    freq: FrequencyMatrix
    release: str
    scheduler: Scheduler | None = field(default=None, repr=False)

    def for_job(self, job: int) -> list[RoundRecord]:
        return [r for r in self.records if r.job == job]


def total_training_time(trace: SimulationTrace) -> tuple[dict[int, float], float]:
    """Per-job sum of round times and their sum over jobs."""
    per_job = {j.job: 0.0 for j in trace.jobs}
    for r in trace.records:
        per_job[r.job] += r.time_cost
    return per_job, float(sum(per_job.values()))


def make_scheduler(
    config: ExperimentConfig,
    profiles: list[DeviceProfile],
    policy: rlds.PolicyParams | None = None,
) -> Scheduler:
    """Instantiate the configured scheduler with its own seeded stream.

    For ``rlds`` the policy comes from ``policy``, else the configured
    checkpoint, else pre-training on this experiment's device population.
    """
    name = config.scheduler.name
    rng = stream(config.seed, STREAM_SCHEDULER)
    if name == "random":
        return baselines.RandomScheduler(rng)
    if name == "greedy":
        return baselines.GreedyScheduler()
    if name == "genetic":
        return baselines.GeneticScheduler(rng, config.scheduler.genetic)
    if name == "fedcs":
        return baselines.FedCSScheduler(rng)
    if name == "bods":
        return bods.BodsScheduler(rng, config.scheduler.bods)
    if name == "rlds":
        if policy is None and config.scheduler.checkpoint:
            policy = rlds.load_checkpoint(config.scheduler.checkpoint)
        if policy is None:
            policy = pretrain_policy(config, profiles).params
        return rlds.RldsScheduler(policy.copy(), rng, config.scheduler.rlds)
    raise ValueError(f"unknown scheduler {name!r}")


def pretrain_policy(config: ExperimentConfig, profiles: list[DeviceProfile] | None = None) -> rlds.PretrainResult:
    """Pre-train an RLDS policy on the experiment's own device population and jobs."""
    if profiles is None:
        profiles = build_profiles(config, stream(config.seed, STREAM_DEVICES))
    p = config.scheduler.rlds
    rng = stream(config.seed, STREAM_POLICY)
    params = rlds.PolicyParams.init(p.hidden, rng)
    env = rlds.PretrainEnv(profiles, config.jobs, config.weights)
    return rlds.pretrain(params, env, p.pretrain_rounds, p.pretrain_n, rng,
                         lr=p.lr, gamma=p.gamma, epsilon=p.pretrain_epsilon, clip_norm=p.clip_norm,
                         optimizer=rlds.make_optimizer(p.optimizer),
                         eval_every=p.eval_every, eval_rounds=p.eval_rounds)


@dataclass
class _Dispatch:
    ctx: SchedulerContext
    plan: SchedulingPlan
    start: float
    times: tuple[float, ...]


class Simulation:
    """One experiment run; call :meth:`run` once."""

    def __init__(self, config: ExperimentConfig, scheduler: Scheduler | None = None,
                 profiles: list[DeviceProfile] | None = None):
        self.config = config
        self.jobs = list(config.jobs)
        self.K = config.num_devices
        self.profiles = profiles or build_profiles(config, stream(config.seed, STREAM_DEVICES))
        self.scheduler = scheduler or make_scheduler(config, self.profiles)
        self.time_norms = [float(expected_times(self.profiles, j).max()) for j in self.jobs]
        self.freq = FrequencyMatrix.zeros(len(self.jobs), self.K)
        self.progress = [JobProgress.start(j) for j in self.jobs]
        self.latest = {j.job: RoundCost.idle(j.job) for j in self.jobs}
        self.busy_with: list[int | None] = [None] * self.K
        self.waiting: list[int] = []
        self.active: dict[int, _Dispatch] = {}
        self.records: list[RoundRecord] = []
        self.now = 0.0
        self._events: list = []

    def _push(self, time: float, kind: int, job: int, device: int = -1) -> None:
        heapq.heappush(self._events, (time, kind, job, device))

    def available(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.K) if self.busy_with[k] is None)

    def run(self) -> SimulationTrace:
        for job in self.jobs:
            self._push(0.0, _START, job.job)
        handlers: dict[int, Callable] = {_RELEASE: self._release, _COMPLETE: self._complete,
                                         _START: self._start}
        while self._events:
            time, kind, job, device = heapq.heappop(self._events)
            self.now = time
            handlers[kind](job, device)
        if self.waiting:
            raise SchedulerContractError(f"jobs {self.waiting} starved with no devices left to release")
        return SimulationTrace(self.records, self.jobs, self.profiles, self.time_norms, self.freq,
                               self.config.engine.release, self.scheduler)

    def _start(self, job: int, _device: int = -1) -> None:
        spec = self.jobs[job]
        avail = self.available()
        need = spec.n_devices(self.K)
        if len(avail) < need:
            if self.config.engine.contention == "defer" or not avail:
                if job not in self.waiting:
                    self.waiting.append(job)
                return
        rnd = self.progress[job].completed_rounds + 1
        others = {m: c for m, c in self.latest.items() if m != job}
        ctx = SchedulerContext(spec, rnd, avail, self.freq, self.profiles, self.config.weights,
                               others, self.time_norms[job], min(need, len(avail)))
        plan = self.scheduler.schedule(ctx)
        check_plan(plan, ctx)
        if plan.round != rnd:
            raise SchedulerContractError(f"plan round {plan.round} != {rnd}")

        samples = sample_times(self.profiles, plan.devices, spec,
                               stream(self.config.seed, STREAM_TIMES, job, rnd), rnd)
        times = tuple(s.t for s in samples)
        end = self.now + max(times)
        for k, t in zip(plan.devices, times):
            self.busy_with[k] = job
            release_at = self.now + t if self.config.engine.release == "per_device" else end
            self._push(release_at, _RELEASE, job, k)
        self._push(end, _COMPLETE, job)
        self.active[job] = _Dispatch(ctx, plan, self.now, times)

    def _release(self, job: int, device: int) -> None:
        if self.busy_with[device] != job:
            raise SchedulerContractError(f"device {device} released by job {job} but held by "
                                         f"{self.busy_with[device]}")
        self.busy_with[device] = None
        for waiting in list(self.waiting):
            need = self.jobs[waiting].n_devices(self.K)
            if len(self.available()) >= need or self.config.engine.contention == "shrink":
                self.waiting.remove(waiting)
                self._start(waiting)

    def _complete(self, job: int, _device: int = -1) -> None:
        d = self.active.pop(job)
        weights = self.config.weights
        t = max(d.times)
        self.freq = update_frequency(self.freq, d.plan)
        fair = variance(self.freq.row(job))
        cost = RoundCost(job, d.plan.round, t, fair, combine(t, fair, weights, self.time_norms[job]))
        self.latest[job] = cost
        total = float(sum(c.combined for c in self.latest.values()))
        self.progress[job] = advance(self.progress[job], fair, self.config.surrogate.lam)
        self.records.append(RoundRecord(
            job, d.plan.round, d.start, self.now, d.plan.devices, d.times,
            t, fair, cost.combined, total, self.progress[job].current_loss,
        ))
        self.scheduler.observe(d.ctx, d.plan, total, cost)
        if not self.progress[job].done:
            self._push(self.now, _START, job)


def run(config: ExperimentConfig, scheduler: Scheduler | None = None,
        profiles: list[DeviceProfile] | None = None) -> SimulationTrace:
    """Simulate ``config`` to completion and return the trace."""
    return Simulation(config, scheduler, profiles).run()
