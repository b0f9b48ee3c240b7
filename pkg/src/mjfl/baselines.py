"""Comparison schedulers: Random, Greedy, Genetic and FedCS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SchedulingPlan
from .scheduling import Scheduler, SchedulerContext


def schedule_random(ctx: SchedulerContext, rng: np.random.Generator) -> SchedulingPlan:
    """Uniform sample of ``n`` available devices without replacement."""
    picks = rng.choice(np.asarray(ctx.available), size=ctx.n, replace=False)
    return ctx.plan(picks)


def fastest(ctx: SchedulerContext, candidates, count: int) -> list[int]:
    """``count`` candidates with the smallest expected time; ties go to the lower id."""
    cands = sorted(int(k) for k in candidates)
    order = np.argsort(ctx.expected_times[cands], kind="stable")
    return [cands[i] for i in order[:count]]


def schedule_greedy(ctx: SchedulerContext) -> SchedulingPlan:
    return ctx.plan(fastest(ctx, ctx.available, ctx.n))


def repair(bits: np.ndarray, available: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Force a 0/1 vector to select exactly ``n`` devices, all from ``available``."""
    out = np.zeros_like(bits)
    out[available] = bits[available]
    chosen = np.flatnonzero(out)
    if len(chosen) > n:
        out[rng.choice(chosen, size=len(chosen) - n, replace=False)] = 0
    elif len(chosen) < n:
        free = np.setdiff1d(available, chosen)
        out[rng.choice(free, size=n - len(chosen), replace=False)] = 1
    return out


@dataclass
class GeneticParams:
    population: int = 20
    generations: int = 10
    tournament: int = 3
    mutation: float = 0.05
    elitism: int = 1


def schedule_genetic(
    ctx: SchedulerContext,
    rng: np.random.Generator,
    params: GeneticParams | None = None,
    initial: np.ndarray | None = None,
) -> SchedulingPlan:
    """Evolve plan encodings toward low estimated total cost.

    Tournament selection, uniform crossover, bit-flip mutation and a repair
    step that restores exactly ``n`` available devices. The best ``elitism``
    individuals survive unchanged, so the best fitness never regresses.
    ``initial`` optionally seeds the population (rows are repaired first).
    """
    p = params or GeneticParams()
    avail = np.asarray(ctx.available)
    if initial is None:
        pop = ctx.random_plans(p.population, rng)
    else:
        pop = np.array([repair(np.asarray(row, dtype=np.int8), avail, ctx.n, rng) for row in initial])
    cost = ctx.estimate_costs(pop)

    for _ in range(p.generations):
        order = np.argsort(cost, kind="stable")
        children = [pop[i].copy() for i in order[: p.elitism]]
        while len(children) < len(pop):
            a = _tournament(cost, p.tournament, rng)
            b = _tournament(cost, p.tournament, rng)
            mask = rng.random(ctx.num_devices) < 0.5
            child = np.where(mask, pop[a], pop[b]).astype(np.int8)
            flips = rng.random(ctx.num_devices) < p.mutation
            child[flips] ^= 1
            children.append(repair(child, avail, ctx.n, rng))
        pop = np.array(children)
        cost = ctx.estimate_costs(pop)

    best = int(np.argmin(cost))
    return ctx.plan(np.flatnonzero(pop[best]))


def _tournament(cost: np.ndarray, size: int, rng: np.random.Generator) -> int:
    entrants = rng.choice(len(cost), size=min(size, len(cost)), replace=False)
    return int(entrants[np.argmin(cost[entrants])])


def max_expected_time(ctx: SchedulerContext, devices) -> float:
    return float(ctx.expected_times[list(devices)].max())


def fedcs_deadline(ctx: SchedulerContext, rng: np.random.Generator, samples: int = 256) -> float:
    """Median estimated round time of random size-n plans over all devices."""
    n, K = ctx.n, ctx.num_devices
    keys = rng.random((samples, K))
    picks = np.argsort(keys, axis=1)[:, :n]
    return float(np.median(ctx.expected_times[picks].max(axis=1)))


def schedule_fedcs(
    ctx: SchedulerContext, rng: np.random.Generator, deadline: float = np.inf
) -> SchedulingPlan:
    """Deadline-bounded greedy selection from a random candidate pool.

    The pool holds ``min(2n, |available|)`` random available devices. Devices
    join in ascending expected time while the estimated round time stays within
    ``deadline``; any shortfall is filled with the next-fastest pool devices.
    """
    pool_size = min(2 * ctx.n, len(ctx.available))
    pool = rng.choice(np.asarray(ctx.available), size=pool_size, replace=False)
    ranked = fastest(ctx, pool, pool_size)
    chosen = []
    for k in ranked:
        if len(chosen) == ctx.n or ctx.expected_times[k] > deadline:
            break
        chosen.append(k)
    for k in ranked:
        if len(chosen) == ctx.n:
            break
        if k not in chosen:
            chosen.append(k)
    return ctx.plan(chosen)


class RandomScheduler(Scheduler):
    name = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def schedule(self, ctx):
        return schedule_random(ctx, self.rng)


class GreedyScheduler(Scheduler):
    name = "greedy"

    def schedule(self, ctx):
        return schedule_greedy(ctx)


class GeneticScheduler(Scheduler):
    name = "genetic"

    def __init__(self, rng: np.random.Generator, params: GeneticParams | None = None):
        self.rng = rng
        self.params = params or GeneticParams()

    def schedule(self, ctx):
        return schedule_genetic(ctx, self.rng, self.params)


class FedCSScheduler(Scheduler):
    name = "fedcs"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.deadlines: dict[int, float] = {}

    def schedule(self, ctx):
        job = ctx.job.job
        if job not in self.deadlines:
            self.deadlines[job] = fedcs_deadline(ctx, self.rng)
        return schedule_fedcs(ctx, self.rng, self.deadlines[job])
