"""Bayesian-optimization device scheduling.

A Gaussian process with a Matérn-5/2 kernel is fitted to (plan encoding,
total cost) observations. Each round a batch of random candidate plans is
drawn from the available devices and the one with the largest Expected
Improvement below the best observed cost is scheduled; its realized cost is
then added to the observation set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .core import SchedulingPlan
from .errors import NumericalError
from .scheduling import Scheduler, SchedulerContext

JITTER_LADDER = (1e-6, 1e-4, 1e-2)
SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class Kernel:
    length_scale: float
    signal_variance: float = 1.0
    jitter: float = 1e-6

    def __call__(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        """Matérn-5/2 covariance on Euclidean distance between rows."""
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        X2 = np.atleast_2d(np.asarray(X2, dtype=float))
        sq = (X1 * X1).sum(1)[:, None] + (X2 * X2).sum(1)[None, :] - 2.0 * X1 @ X2.T
        r = SQRT5 * np.sqrt(np.maximum(sq, 0.0)) / self.length_scale
        return self.signal_variance * (1.0 + r + r * r / 3.0) * np.exp(-r)


@dataclass(frozen=True, eq=False)
class GpState:
    """Observations plus the cached factorization of their Gram matrix.

    Costs are standardized to zero mean and unit variance before fitting;
    ``y`` holds the standardized values and ``costs`` the raw ones.
    """

    X: np.ndarray
    costs: np.ndarray
    kernel: Kernel
    cost_mean: float
    cost_std: float
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter_used: float

    @property
    def size(self) -> int:
        return len(self.costs)

    @property
    def best(self) -> float:
        """Smallest standardized cost observed."""
        return float(self.y.min())

    @property
    def best_plan(self) -> np.ndarray:
        return self.X[int(np.argmin(self.costs))]

    def standardize(self, cost):
        return (np.asarray(cost, dtype=float) - self.cost_mean) / self.cost_std

    def gram(self) -> np.ndarray:
        return self.kernel(self.X, self.X)


def gp_fit(X: np.ndarray, costs: np.ndarray, kernel: Kernel) -> GpState:
    """Standardize costs and factorize the Gram matrix.

    Jitter escalates along 1e-6, 1e-4, 1e-2 (starting from ``kernel.jitter``)
    until the Cholesky factorization succeeds. The jitter only stabilizes the
    factorization: the weights are then polished against the jitter-free
    Gram matrix (see :func:`refine_weights`), so the posterior mean
    interpolates the observations.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    costs = np.asarray(costs, dtype=float).ravel()
    if len(costs) == 0 or len(costs) != len(X):
        raise ValueError("need at least one observation and one cost per plan")
    if not np.isfinite(costs).all():
        raise NumericalError("non-finite cost in observations")
    mean = float(costs.mean())
    std = float(costs.std())
    if not std > 0:
        std = 1.0
    y = (costs - mean) / std

    gram = kernel(X, X)
    gram = 0.5 * (gram + gram.T)
    ladder = [kernel.jitter] + [j for j in JITTER_LADDER if j > kernel.jitter]
    for jitter in ladder:
        try:
            chol = linalg.cholesky(gram + jitter * np.eye(len(X)), lower=True)
        except linalg.LinAlgError:
            continue
        return GpState(X, costs, kernel, mean, std, y, chol, refine_weights(gram, chol, y), jitter)
    raise NumericalError(f"Gram matrix not positive definite even with jitter {ladder[-1]}")


def refine_weights(gram: np.ndarray, chol: np.ndarray, y: np.ndarray, max_steps: int = 10) -> np.ndarray:
    """Solve ``gram @ alpha = y`` by iterative refinement preconditioned with ``chol``.

    ``chol`` factorizes the jittered Gram matrix. Refinement stops once a
    step fails to halve the residual, which is what happens when duplicate
    plans carry different costs and no exact solution exists; the jittered
    solution is then kept.
    """
    alpha = linalg.cho_solve((chol, True), y)
    resid = y - gram @ alpha
    norm_r = np.linalg.norm(resid)
    tol = 1e-14 * max(np.linalg.norm(y), 1.0)
    for _ in range(max_steps):
        if norm_r <= tol:
            break
        cand = alpha + linalg.cho_solve((chol, True), resid)
        cand_resid = y - gram @ cand
        cand_norm = np.linalg.norm(cand_resid)
        if not cand_norm < 0.5 * norm_r:
            break
        alpha, resid, norm_r = cand, cand_resid, cand_norm
    return alpha


def gp_init(candidates: np.ndarray, cost_fn, kernel: Kernel) -> GpState:
    """Evaluate ``cost_fn`` on each candidate encoding and fit the GP."""
    X = np.atleast_2d(np.asarray(candidates))
    costs = np.asarray(cost_fn(X), dtype=float)
    return gp_fit(X, costs, kernel)


def gp_append(state: GpState, x: np.ndarray, cost: float, max_observations: int | None = None) -> GpState:
    """Add one observation, dropping the oldest ones beyond ``max_observations``."""
    X = np.vstack([state.X, np.asarray(x, dtype=float)[None, :]])
    costs = np.append(state.costs, float(cost))
    if max_observations is not None and len(costs) > max_observations:
        X, costs = X[-max_observations:], costs[-max_observations:]
    return gp_fit(X, costs, state.kernel)


def gp_posterior(state: GpState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance (standardized units) at one or more encodings.

    Returns arrays of shape ``(n,)``; a 1-D ``x`` is treated as a single query.
    The jitter is subtracted from the variance again before clamping at zero,
    so observed plans report no residual uncertainty.
    """
    Xq = np.atleast_2d(np.asarray(x, dtype=float))
    ks = state.kernel(Xq, state.X)
    mean = ks @ state.alpha
    v = linalg.solve_triangular(state.chol, ks.T, lower=True)
    var = state.kernel.signal_variance - (v * v).sum(axis=0) - state.jitter_used
    return mean, np.maximum(var, 0.0)


def ei_from_moments(best: float, mean, var) -> np.ndarray:
    """Expected improvement below ``best`` for a Gaussian with the given moments."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    gain = best - mean
    out = np.maximum(gain, 0.0)
    pos = sigma > 0
    z = gain[pos] / sigma[pos]
    out[pos] = gain[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    return np.maximum(out, 0.0)


def expected_improvement(state: GpState, x: np.ndarray) -> np.ndarray:
    mean, var = gp_posterior(state, x)
    return ei_from_moments(state.best, mean, var)


def log_marginal_likelihood(state: GpState) -> float:
    n = state.size
    return float(
        -0.5 * state.y @ state.alpha
        - np.log(np.diag(state.chol)).sum()
        - 0.5 * n * math.log(2 * math.pi)
    )


def refit_length_scale(state: GpState, base: float, factors=(0.5, 1.0, 2.0, 4.0)) -> GpState:
    """Pick the length scale on a small grid around ``base`` by marginal likelihood."""
    best = None
    for f in factors:
        kern = replace(state.kernel, length_scale=base * f)
        try:
            cand = gp_fit(state.X, state.costs, kern)
        except NumericalError:
            continue
        score = log_marginal_likelihood(cand)
        if best is None or score > best[0]:
            best = (score, cand)
    return best[1] if best else state


def argmax_first(values: np.ndarray, tol: float = 1e-12) -> int:
    """Index of the maximum; values within ``tol`` of it count as ties, first wins."""
    values = np.asarray(values)
    return int(np.flatnonzero(values >= values.max() - tol)[0])


def bods_schedule(
    ctx: SchedulerContext,
    state: GpState,
    rng: np.random.Generator | None = None,
    n_candidates: int = 256,
    candidates: np.ndarray | None = None,
) -> tuple[SchedulingPlan, np.ndarray]:
    """Choose the candidate with maximal EI.

    Candidates are ``n_candidates`` random plans over ``ctx.available`` unless
    given explicitly. Returns the plan and the EI of every candidate.
    """
    if candidates is None:
        candidates = ctx.random_plans(n_candidates, rng)
    candidates = np.atleast_2d(candidates)
    ei = expected_improvement(state, candidates)
    best = argmax_first(ei)
    return ctx.plan(np.flatnonzero(candidates[best])), ei


def gp_with_costs(state: GpState, costs: np.ndarray) -> GpState:
    """Same observations and factorization, new cost values."""
    costs = np.asarray(costs, dtype=float).ravel()
    mean = float(costs.mean())
    std = float(costs.std())
    if not std > 0:
        std = 1.0
    y = (costs - mean) / std
    gram = state.gram()
    alpha = refine_weights(0.5 * (gram + gram.T), state.chol, y)
    return replace(state, costs=costs, cost_mean=mean, cost_std=std, y=y, alpha=alpha)


@dataclass
class BodsParams:
    candidates: int = 256
    init_points: int = 10
    length_scale: float | None = None  # None: length_scale_factor * sqrt(2 * n)
    length_scale_factor: float = 3.0
    max_observations: int = 300
    refit: bool = False
    refresh: bool = True


@dataclass
class _JobGp:
    state: GpState
    base_length_scale: float
    times: np.ndarray  # expected straggler time of each stored plan
    appended: int = 0


class BodsScheduler(Scheduler):
    """One GP per job; initialized lazily on the job's first scheduling call.

    With ``refresh`` on, every stored plan is re-costed before each decision
    under the current frequency counts and the other jobs' latest costs, with
    expected device times in the straggler term (realized round times are too
    noisy to rank candidates). Without it the realized total cost is kept.
    """

    name = "bods"

    def __init__(self, rng: np.random.Generator, params: BodsParams | None = None):
        self.rng = rng
        self.params = params or BodsParams()
        self.gps: dict[int, _JobGp] = {}

    def _init(self, ctx: SchedulerContext) -> _JobGp:
        ell = self.params.length_scale or self.params.length_scale_factor * math.sqrt(2 * ctx.n)
        X = ctx.random_plans(self.params.init_points, self.rng)
        state = gp_init(X, ctx.estimate_costs, Kernel(ell))
        times = np.where(X.astype(bool), ctx.expected_times[None, :], -np.inf).max(axis=1)
        return _JobGp(state, ell, times)

    def schedule(self, ctx):
        job = ctx.job.job
        if job not in self.gps:
            self.gps[job] = self._init(ctx)
        gp = self.gps[job]
        if self.params.refresh:
            costs = estimate_plan_costs(gp.state.X, gp.times, ctx)
            gp.state = gp_with_costs(gp.state, costs)
        plan, _ = bods_schedule(ctx, gp.state, self.rng, self.params.candidates)
        return plan

    def observe(self, ctx, plan, total_cost, round_cost=None):
        gp = self.gps[plan.job]
        x = np.zeros(ctx.num_devices)
        x[list(plan.devices)] = 1.0
        t = float(ctx.expected_times[list(plan.devices)].max())
        gp.state = gp_append(gp.state, x, total_cost, self.params.max_observations)
        gp.times = np.append(gp.times, t)[-gp.state.size:]
        gp.appended += 1
        if self.params.refit and gp.appended % 10 == 0:
            gp.state = refit_length_scale(gp.state, gp.base_length_scale)


def estimate_plan_costs(X: np.ndarray, times: np.ndarray, ctx: SchedulerContext) -> np.ndarray:
    """Total cost of stored plans under the current state, given each plan's straggler time."""
    w = ctx.weights
    c = ctx.counts[None, :].astype(float) + X
    fair = ((c - c.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    return w.alpha * times / ctx.time_norm + w.beta * fair + ctx.others_total
