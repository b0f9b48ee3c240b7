"""Reinforcement-learning device scheduling.

An LSTM walks the device sequence (ascending id) and a linear head with a
sigmoid turns each hidden state into a scheduling probability. An ε-greedy
converter picks ``n`` devices from those probabilities. Parameters are updated
with REINFORCE: the log-probabilities of the selected devices are pushed up in
proportion to ``reward - baseline``, with gradients from explicit
backpropagation through time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FrequencyMatrix, JobSpec, SchedulingPlan, update_frequency
from .costs import CostWeights, RoundCost, combine, estimate_costs, variance
from .devices import DeviceProfile, expected_times
from .errors import NumericalError
from .scheduling import Scheduler, SchedulerContext

logger = logging.getLogger(__name__)

N_FEATURES = 4
LOGIT_CLIP = 30.0
FEATURE_CENTER = 0.5  # subtracted from [0, 1] features before the input projection
PARAM_NAMES = ("Wx", "Wh", "b", "w_fc", "b_fc")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class PolicyParams:
    """LSTM (gate order input, forget, cell, output) plus a linear head.

    Shapes: ``Wx (4H, F)``, ``Wh (4H, H)``, ``b (4H,)``, ``w_fc (H,)``, ``b_fc (1,)``.
    """

    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray
    w_fc: np.ndarray
    b_fc: np.ndarray

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, n_features: int = N_FEATURES) -> PolicyParams:
        s = 1.0 / np.sqrt(hidden)
        u = lambda *shape: rng.uniform(-s, s, size=shape)  # noqa: E731
        return cls(u(4 * hidden, n_features), u(4 * hidden, hidden), u(4 * hidden), u(hidden), u(1))

    @classmethod
    def zeros(cls, hidden: int, n_features: int = N_FEATURES) -> PolicyParams:
        z = np.zeros
        return cls(z((4 * hidden, n_features)), z((4 * hidden, hidden)), z(4 * hidden), z(hidden), z(1))

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]

    @property
    def n_features(self) -> int:
        return self.Wx.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> PolicyParams:
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def with_flat(self, vec: np.ndarray) -> PolicyParams:
        out, i = {}, 0
        for name, arr in self.arrays().items():
            out[name] = np.asarray(vec[i : i + arr.size], dtype=float).reshape(arr.shape).copy()
            i += arr.size
        return PolicyParams(**out)

    def allclose(self, other: PolicyParams, **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.flat(), other.flat()))

    def equal(self, other: PolicyParams) -> bool:
        return np.array_equal(self.flat(), other.flat())


@dataclass
class ForwardCache:
    x: np.ndarray
    gates: np.ndarray  # (K, 4H) activated gates
    c: np.ndarray  # (K + 1, H), row 0 is the initial state
    h: np.ndarray  # (K + 1, H)
    logits: np.ndarray
    clipped: np.ndarray


def policy_forward(params: PolicyParams, features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Scheduling probability of each device in the sequence.

    Features are shifted to be centred on zero before entering the LSTM, so
    that the input weights of a feature learn from its variation across
    devices rather than from its mean level.
    """
    x = np.asarray(features, dtype=float) - FEATURE_CENTER
    K, H = x.shape[0], params.hidden
    gates = np.empty((K, 4 * H))
    c = np.zeros((K + 1, H))
    h = np.zeros((K + 1, H))
    xz = x @ params.Wx.T + params.b
    for t in range(K):
        z = xz[t] + params.Wh @ h[t]
        g = gates[t]
        g[: 2 * H] = sigmoid(z[: 2 * H])
        g[2 * H : 3 * H] = np.tanh(z[2 * H : 3 * H])
        g[3 * H :] = sigmoid(z[3 * H :])
        c[t + 1] = g[H : 2 * H] * c[t] + g[:H] * g[2 * H : 3 * H]
        h[t + 1] = g[3 * H :] * np.tanh(c[t + 1])
    raw = h[1:] @ params.w_fc + params.b_fc[0]
    clipped = np.abs(raw) > LOGIT_CLIP
    logits = np.clip(raw, -LOGIT_CLIP, LOGIT_CLIP)
    probs = sigmoid(logits)
    if not np.isfinite(probs).all():
        raise NumericalError("non-finite policy output")
    return probs, ForwardCache(x, gates, c, h, logits, clipped)


def policy_backward(params: PolicyParams, cache: ForwardCache, dlogits: np.ndarray) -> PolicyParams:
    """Gradient of ``sum(dlogits * logits)`` with respect to every parameter."""
    H = params.hidden
    K = cache.x.shape[0]
    dlog = np.where(cache.clipped, 0.0, dlogits)
    grads = PolicyParams.zeros(H, params.n_features)
    grads.w_fc = cache.h[1:].T @ dlog
    grads.b_fc = np.array([dlog.sum()])
    dz_all = np.empty((K, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(K - 1, -1, -1):
        g = cache.gates[t]
        i, f, gg, o = g[:H], g[H : 2 * H], g[2 * H : 3 * H], g[3 * H :]
        tc = np.tanh(cache.c[t + 1])
        dh = dlog[t] * params.w_fc + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[t]
        dz[:H] = dc * gg * i * (1.0 - i)
        dz[H : 2 * H] = dc * cache.c[t] * f * (1.0 - f)
        dz[2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
        dz[3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = params.Wh.T @ dz
    grads.Wx = dz_all.T @ cache.x
    grads.Wh = dz_all.T @ cache.h[:-1]
    grads.b = dz_all.sum(axis=0)
    return grads


def selected_log_prob(params: PolicyParams, features: np.ndarray, selected: Sequence[int]) -> float:
    probs, _ = policy_forward(params, features)
    return float(np.log(probs[list(selected)]).sum())


def log_prob_grad(params: PolicyParams, features: np.ndarray, selected: Sequence[int]) -> PolicyParams:
    """Gradient of ``sum(log p_k for k in selected)``."""
    probs, cache = policy_forward(params, features)
    dlogits = np.zeros(len(probs))
    # d log(sigmoid(z)) / dz = 1 - sigmoid(z)
    dlogits[list(selected)] = 1.0 - probs[list(selected)]
    return policy_backward(params, cache, dlogits)


@dataclass(frozen=True)
class FeatureScales:
    """Min-max ranges of log capability parameters across the population.

    ``gap`` is the count difference from the job's mean count that maps the
    frequency feature to about 0.88 (tanh of 1).
    """

    log_a: tuple[float, float]
    log_mu: tuple[float, float]
    gap: float = 5.0

    @classmethod
    def from_profiles(cls, profiles: Sequence[DeviceProfile]) -> FeatureScales:
        la = np.log([p.a for p in profiles])
        lm = np.log([p.mu for p in profiles])
        return cls((float(la.min()), float(la.max())), (float(lm.min()), float(lm.max())))


def _minmax(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi - lo <= 0:
        return np.full(len(values), 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def device_features(
    profiles: Sequence[DeviceProfile],
    counts: np.ndarray,
    occupied: np.ndarray,
    scales: FeatureScales | None = None,
) -> np.ndarray:
    """``(K, 4)`` rows of normalized a, normalized mu, normalized frequency, occupied flag.

    The frequency column is ``(1 + tanh((s_k - mean(s)) / gap)) / 2`` for the
    current job's counts: 0.5 at the mean, below it for under-used devices.
    It keeps the absolute size of the imbalance, which is what the fairness
    cost responds to.
    """
    scales = scales or FeatureScales.from_profiles(profiles)
    a = _minmax(np.log([p.a for p in profiles]), *scales.log_a)
    mu = _minmax(np.log([p.mu for p in profiles]), *scales.log_mu)
    counts = np.asarray(counts, dtype=float)
    s = 0.5 * (1.0 + np.tanh((counts - counts.mean()) / scales.gap))
    return np.column_stack([a, mu, s, np.asarray(occupied, dtype=float)])


def convert_policy(
    probs: np.ndarray,
    available: Sequence[int],
    n: int,
    epsilon: float,
    rng: np.random.Generator,
) -> list[int]:
    """ε-greedy selection of ``n`` distinct available devices.

    Each pick is, with probability ``1 - epsilon``, the unpicked available
    device of highest probability (lowest id on ties), otherwise a uniformly
    random unpicked available device.
    """
    remaining = sorted(int(k) for k in available)
    if len(remaining) < n:
        raise ValueError(f"need {n} devices, only {len(remaining)} available")
    probs = np.asarray(probs)
    chosen = []
    for _ in range(n):
        if rng.random() < epsilon:
            idx = int(rng.integers(len(remaining)))
        else:
            idx = int(np.argmax(probs[remaining]))
        chosen.append(remaining.pop(idx))
    return chosen


@dataclass
class RolloutRecord:
    plan: SchedulingPlan
    probs: np.ndarray
    cache: ForwardCache
    reward: float = 0.0


@dataclass
class BaselineState:
    gamma: float = 0.1
    values: dict[int, float] = field(default_factory=dict)

    def get(self, job: int, default: float = 0.0) -> float:
        return self.values.get(job, default)

    def updated(self, job: int, mean_reward: float) -> BaselineState:
        """Move toward ``mean_reward``; a job's first update sets the baseline to it."""
        vals = dict(self.values)
        vals[job] = (1.0 - self.gamma) * self.get(job, mean_reward) + self.gamma * mean_reward
        return BaselineState(self.gamma, vals)


@dataclass
class Adam:
    """Adam moments over the flattened parameter vector."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, grad: np.ndarray, lr: float, theta: np.ndarray | None = None) -> np.ndarray:
        """Return the ascent step for ``grad`` and advance the moments.

        With ``weight_decay`` and ``theta`` given, the step also shrinks
        ``theta`` by ``lr * weight_decay`` (decoupled decay).
        """
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        step = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay and theta is not None:
            step -= lr * self.weight_decay * theta
        return step


def make_optimizer(name: str) -> Adam | None:
    if name == "adam":
        return Adam()
    if name == "sgd":
        return None
    raise ValueError(f"unknown optimizer {name!r}")


def reinforce_update(
    params: PolicyParams,
    rollouts: Sequence[RolloutRecord],
    baseline: BaselineState,
    lr: float,
    clip_norm: float | None = 5.0,
    center: bool = False,
    optimizer: Adam | None = None,
) -> tuple[PolicyParams, BaselineState]:
    """One REINFORCE step over ``N`` rollouts of the same job.

    ``theta += lr/N * sum_n (R_n - b) * grad sum_{k in V_n} log p_k``; the
    averaged gradient is rescaled to ``clip_norm`` if its global norm exceeds
    it. With an ``optimizer`` the clipped gradient goes through Adam instead
    of a plain ``lr`` step; a zero gradient never touches its moments. The
    job's baseline then moves toward the mean reward.

    A job without a baseline yet uses the mean reward of ``rollouts``, as does
    every call with ``center`` set (rollouts sharing one state are then
    compared only with each other).
    """
    if not rollouts:
        raise ValueError("need at least one rollout")
    job = rollouts[0].plan.job
    N = len(rollouts)
    mean_reward = float(np.mean([r.reward for r in rollouts]))
    b = mean_reward if center else baseline.get(job, mean_reward)

    # rollouts that share a forward pass are backpropagated together
    groups: dict[int, tuple[ForwardCache, np.ndarray]] = {}
    for r in rollouts:
        adv = r.reward - b
        cache, dlog = groups.setdefault(id(r.cache), (r.cache, np.zeros(len(r.probs))))
        sel = list(r.plan.devices)
        dlog[sel] += adv * (1.0 - r.probs[sel])

    total = None
    for cache, dlog in groups.values():
        if not dlog.any():
            continue
        g = policy_backward(params, cache, dlog).flat()
        total = g if total is None else total + g

    new_params = params
    if total is not None and total.any():
        total /= N
        if not np.isfinite(total).all():
            raise NumericalError("non-finite policy gradient")
        gnorm = float(np.linalg.norm(total))
        if clip_norm is not None and gnorm > clip_norm:
            total *= clip_norm / gnorm
        step = lr * total if optimizer is None else optimizer.step(total, lr, params.flat())
        new_params = params.with_flat(params.flat() + step)

    return new_params, baseline.updated(job, mean_reward)


@dataclass
class RldsParams:
    hidden: int = 64
    lr: float = 3e-4  # pre-training step size
    online_lr: float = 1e-4  # plain gradient step during execution
    gamma: float = 1.0
    epsilon: float = 0.05
    pretrain_epsilon: float = 0.3
    pretrain_rounds: int = 1000
    pretrain_n: int = 32
    eval_every: int | None = 100
    eval_rounds: int = 600
    clip_norm: float = 5.0
    optimizer: str = "adam"  # pre-training optimizer, or "sgd"


@dataclass
class PretrainEnv:
    """Synthetic multi-job environment for pre-training.

    Candidate plans are scored with expected device times; each round's best
    plan is committed to the frequency matrix and marks its devices occupied
    until the same job is scheduled again. Frequency counts, occupation and
    latest costs reset every ``episode`` rounds, so rewards from different
    stages of training are measured under the same conditions.
    """

    profiles: Sequence[DeviceProfile]
    jobs: Sequence[JobSpec]
    weights: CostWeights
    episode: int | None = None  # rounds between state resets; None never resets

    def __post_init__(self):
        self.device_times = [expected_times(self.profiles, j) for j in self.jobs]
        self.time_norms = [float(t.max()) for t in self.device_times]
        self.scales = FeatureScales.from_profiles(self.profiles)


@dataclass
class PretrainResult:
    params: PolicyParams
    baseline: BaselineState
    mean_rewards: list[float]
    committed_costs: list[float]
    eval_costs: list[tuple[int, float]] = field(default_factory=list)  # (round, mean cost)
    selected_round: int | None = None


class _EnvState:
    """Mutable frequency, occupation and latest-cost state of a :class:`PretrainEnv`."""

    def __init__(self, env: PretrainEnv):
        self.env = env
        K, M = len(env.profiles), len(env.jobs)
        self.freq = FrequencyMatrix.zeros(M, K)
        self.latest = {m: RoundCost.idle(m) for m in range(M)}
        self.in_use: dict[int, tuple[int, ...]] = {}

    def observe(self, m: int, params: PolicyParams):
        """Features, availability and policy output for job ``m``'s next round."""
        env = self.env
        occupied = np.zeros(len(env.profiles), dtype=bool)
        for other, devs in self.in_use.items():
            if other != m:
                occupied[list(devs)] = True
        feats = device_features(env.profiles, self.freq.row(m), occupied, env.scales)
        probs, cache = policy_forward(params, feats)
        return np.flatnonzero(~occupied), probs, cache

    def costs(self, m: int, plans: Sequence[SchedulingPlan]) -> np.ndarray:
        env = self.env
        bits = np.zeros((len(plans), len(env.profiles)), dtype=np.int8)
        for i, p in enumerate(plans):
            bits[i, list(p.devices)] = 1
        others = sum(c.combined for j, c in self.latest.items() if j != m)
        return estimate_costs(bits, env.device_times[m], self.freq.row(m), env.weights,
                              env.time_norms[m], others)

    def commit(self, plan: SchedulingPlan) -> None:
        env, m = self.env, plan.job
        t = float(env.device_times[m][list(plan.devices)].max())
        self.freq = update_frequency(self.freq, plan)
        fair = variance(self.freq.row(m))
        self.latest[m] = RoundCost(m, plan.round, t, fair, combine(t, fair, env.weights, env.time_norms[m]))
        self.in_use[m] = plan.devices


def evaluate_policy(params: PolicyParams, env: PretrainEnv, rounds: int,
                    rng: np.random.Generator | None = None, epsilon: float = 0.0) -> float:
    """Mean total cost when ``params`` alone schedules ``rounds`` rounds from a fresh state."""
    rng = rng or np.random.default_rng(0)
    state = _EnvState(env)
    M, K = len(env.jobs), len(env.profiles)
    total = 0.0
    for r in range(rounds):
        m = r % M
        available, probs, _ = state.observe(m, params)
        plan = SchedulingPlan(m, r // M, tuple(convert_policy(probs, available, env.jobs[m].n_devices(K),
                                                              epsilon, rng)))
        total += float(state.costs(m, [plan])[0])
        state.commit(plan)
    return total / max(rounds, 1)


def pretrain(
    params: PolicyParams,
    env: PretrainEnv,
    rounds: int,
    n_rollouts: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    gamma: float = 0.1,
    epsilon: float = 0.1,
    clip_norm: float = 5.0,
    center: bool = True,
    optimizer: Adam | None = None,
    eval_every: int | None = None,
    eval_rounds: int = 300,
) -> PretrainResult:
    """Pre-train the shared policy, cycling through the jobs round by round.

    Each round draws ``n_rollouts`` plans from the policy, scores them with
    the expected-time total cost, takes one REINFORCE step and commits the
    cheapest plan. With ``eval_every`` set, the parameters are also scored
    every ``eval_every`` rounds (and at the end) by :func:`evaluate_policy`
    over ``eval_rounds`` greedy rounds, and the best-scoring snapshot is
    returned instead of the final one.
    """
    if n_rollouts <= 1:
        raise ValueError("pre-training needs more than one rollout per round")
    K, M = len(env.profiles), len(env.jobs)
    baseline = BaselineState(gamma)
    params = params.copy()
    mean_rewards, committed, evals = [], [], []
    best: tuple[float, PolicyParams, int] | None = None

    def checkpoint(r: int) -> None:
        nonlocal best
        score = evaluate_policy(params, env, eval_rounds)
        evals.append((r, score))
        if best is None or score < best[0]:
            best = (score, params.copy(), r)

    for r in range(rounds):
        if eval_every and r % eval_every == 0:
            checkpoint(r)
        if r == 0 or (env.episode and r % env.episode == 0):
            state = _EnvState(env)
        m = r % M
        available, probs, cache = state.observe(m, params)
        n = env.jobs[m].n_devices(K)
        plans = [
            SchedulingPlan(m, r // M, tuple(convert_policy(probs, available, n, epsilon, rng)))
            for _ in range(n_rollouts)
        ]
        costs = state.costs(m, plans)
        rollouts = [RolloutRecord(p, probs, cache, -float(c)) for p, c in zip(plans, costs)]
        params, baseline = reinforce_update(params, rollouts, baseline, lr, clip_norm, center, optimizer)

        chosen = int(np.argmin(costs))
        state.commit(plans[chosen])
        mean_rewards.append(float(-costs.mean()))
        committed.append(float(costs[chosen]))

    if eval_every:
        checkpoint(rounds)
        return PretrainResult(best[1], baseline, mean_rewards, committed, evals, best[2])
    return PretrainResult(params, baseline, mean_rewards, committed)


class RldsScheduler(Scheduler):
    """Shared policy across jobs; one online REINFORCE step after each executed round."""

    name = "rlds"

    def __init__(
        self,
        policy: PolicyParams,
        rng: np.random.Generator,
        params: RldsParams | None = None,
        baseline: BaselineState | None = None,
    ):
        self.policy = policy
        self.rng = rng
        self.params = params or RldsParams()
        self.baseline = baseline or BaselineState(self.params.gamma)
        self.pending: dict[tuple[int, int], RolloutRecord] = {}
        self.scales: FeatureScales | None = None
        self.rewards: dict[int, list[float]] = {}

    def schedule(self, ctx):
        if self.scales is None:
            self.scales = FeatureScales.from_profiles(ctx.profiles)
        occupied = np.ones(ctx.num_devices, dtype=bool)
        occupied[list(ctx.available)] = False
        feats = device_features(ctx.profiles, ctx.counts, occupied, self.scales)
        probs, cache = policy_forward(self.policy, feats)
        devices = convert_policy(probs, ctx.available, ctx.n, self.params.epsilon, self.rng)
        plan = ctx.plan(devices)
        self.pending[(plan.job, plan.round)] = RolloutRecord(plan, probs, cache)
        return plan

    def observe(self, ctx, plan, total_cost, round_cost=None):
        record = self.pending.pop((plan.job, plan.round))
        record.reward = -float(total_cost)
        self.rewards.setdefault(plan.job, []).append(record.reward)
        self.policy, self.baseline = reinforce_update(
            self.policy, [record], self.baseline, self.params.online_lr, self.params.clip_norm
        )


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    """Write named parameter tensors (``.npz``: each array carries its shape header)."""
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **{f"lstm.{k}" if k in ("Wx", "Wh", "b") else f"fc.{k}": v
                        for k, v in params.arrays().items()})


def load_checkpoint(path: str | Path) -> PolicyParams:
    with np.load(Path(path)) as data:
        arrays = {}
        for name in PARAM_NAMES:
            key = f"lstm.{name}" if name in ("Wx", "Wh", "b") else f"fc.{name}"
            if key not in data:
                raise ValueError(f"checkpoint {path} is missing tensor {key}")
            arrays[name] = data[key].astype(float)
    params = PolicyParams(**arrays)
    H, F = params.hidden, params.n_features
    expected = {"Wx": (4 * H, F), "Wh": (4 * H, H), "b": (4 * H,), "w_fc": (H,), "b_fc": (1,)}
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {shape}")
    return params
