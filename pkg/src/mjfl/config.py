"""Experiment configuration: YAML loading, defaults, and fail-fast validation."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .baselines import GeneticParams
from .bods import BodsParams
from .core import JobSpec
from .costs import CostWeights
from .devices import DeviceProfile, generate_population
from .errors import ConfigError, InvariantViolation
from .rlds import RldsParams
from .surrogate import estimate_rounds, loss_at

SCHEDULERS = ("random", "greedy", "genetic", "fedcs", "bods", "rlds")
RELEASE_MODES = ("per_device", "at_round_end")
CONTENTION_MODES = ("defer", "shrink")
# ideal rounds at which the default target loss sits on a job's curve
DEFAULT_TARGET_ROUNDS = 50


@dataclass
class DevicesConfig:
    count: int = 100
    a_range: tuple[float, float] = (0.001, 0.01)
    mu_range: tuple[float, float] = (1.0, 10.0)
    data_range: tuple[int, int] = (200, 1200)
    profiles: list[dict] | None = None


@dataclass
class CurveRanges:
    b0: tuple[float, float] = (0.05, 0.2)
    b1: tuple[float, float] = (0.5, 2.0)
    b2: tuple[float, float] = (0.0, 0.2)


@dataclass
class SurrogateConfig:
    lam: float = 1.0
    curve_ranges: CurveRanges = field(default_factory=CurveRanges)


@dataclass
class EngineConfig:
    release: str = "per_device"
    contention: str = "defer"


@dataclass
class SchedulerConfig:
    name: str = "random"
    genetic: GeneticParams = field(default_factory=GeneticParams)
    bods: BodsParams = field(default_factory=BodsParams)
    rlds: RldsParams = field(default_factory=RldsParams)
    checkpoint: str | None = None


@dataclass
class ExperimentConfig:
    seed: int
    devices: DevicesConfig
    jobs: list[JobSpec]
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    output: str = "out"

    @property
    def num_devices(self) -> int:
        return self.devices.count

    @property
    def num_jobs(self) -> int:
        return len(self.jobs)

    def with_overrides(self, scheduler: str | None = None, seed: int | None = None,
                       output: str | None = None) -> ExperimentConfig:
        """Copy with CLI overrides applied.

        The seed override keeps already-resolved job curves, so only device
        sampling, time draws and scheduler randomness change.
        """
        cfg = copy.deepcopy(self)
        if scheduler is not None:
            _check_choice("scheduler.name", scheduler, SCHEDULERS)
            cfg.scheduler.name = scheduler
        if seed is not None:
            cfg.seed = int(seed)
        if output is not None:
            cfg.output = str(output)
        return cfg

    def to_dict(self) -> dict:
        """Fully resolved configuration, loadable again by :func:`parse_config`."""
        d = {
            "seed": self.seed,
            "devices": {
                "count": self.devices.count,
                "a_range": list(self.devices.a_range),
                "mu_range": list(self.devices.mu_range),
                "data_range": list(self.devices.data_range),
            },
            "jobs": [
                {
                    "local_epochs": j.local_epochs,
                    "participation": j.participation,
                    "target_loss": j.target_loss,
                    "curve": list(j.curve),
                    "max_rounds": j.max_rounds,
                }
                for j in self.jobs
            ],
            "scheduler": {
                "name": self.scheduler.name,
                "genetic": asdict(self.scheduler.genetic),
                "bods": asdict(self.scheduler.bods),
                "rlds": asdict(self.scheduler.rlds),
            },
            "weights": {"alpha": self.weights.alpha, "beta": self.weights.beta},
            "surrogate": {
                "lambda": self.surrogate.lam,
                "curve_ranges": {k: list(v) for k, v in asdict(self.surrogate.curve_ranges).items()},
            },
            "engine": asdict(self.engine),
            "output": self.output,
        }
        if self.devices.profiles is not None:
            d["devices"]["profiles"] = copy.deepcopy(self.devices.profiles)
        if self.scheduler.checkpoint is not None:
            d["scheduler"]["checkpoint"] = self.scheduler.checkpoint
        return d


def _check_keys(section: dict, allowed, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")


def _check_choice(path: str, value, choices) -> None:
    if value not in choices:
        raise ConfigError(path, f"must be one of {', '.join(choices)}, got {value!r}")


def _number(path: str, value, *, integer=False, positive=False, nonneg=False, unit=False) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(path, f"expected an integer, got {value!r}")
    value = int(value) if integer else float(value)
    if not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    if positive and value <= 0:
        raise ConfigError(path, f"must be positive, got {value}")
    if nonneg and value < 0:
        raise ConfigError(path, f"must be non-negative, got {value}")
    if unit and not 0 < value <= 1:
        raise ConfigError(path, f"must be in (0, 1], got {value}")
    return value


def _range(path: str, value, *, integer=False, positive=False, nonneg=False) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(path, "expected a [min, max] pair")
    lo = _number(f"{path}[0]", value[0], integer=integer, positive=positive, nonneg=nonneg)
    hi = _number(f"{path}[1]", value[1], integer=integer, positive=positive, nonneg=nonneg)
    if lo > hi:
        raise ConfigError(path, f"min {lo} exceeds max {hi}")
    return lo, hi


def _params(cls, raw: dict, path: str, checks: dict):
    """Build a parameter dataclass from ``raw``, validating each key with ``checks``."""
    names = {f.name for f in fields(cls)}
    _check_keys(raw, names, path)
    values = {}
    for key, value in raw.items():
        check = checks.get(key)
        values[key] = check(f"{path}.{key}", value) if check else value
    return cls(**values)


def _pos_int(p, v):
    return _number(p, v, integer=True, positive=True)


def _pos(p, v):
    return _number(p, v, positive=True)


def _prob(p, v):
    v = _number(p, v, nonneg=True)
    if v > 1:
        raise ConfigError(p, f"must be in [0, 1], got {v}")
    return v


def _flag(p, v):
    if not isinstance(v, bool):
        raise ConfigError(p, "expected true or false")
    return v


def _opt_pos(p, v):
    return None if v is None else _pos(p, v)


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a raw mapping and resolve every default."""
    _check_keys(raw, {"seed", "devices", "jobs", "scheduler", "weights", "surrogate", "engine", "output"}, "")
    if "seed" not in raw:
        raise ConfigError("seed", "required")
    seed = _number("seed", raw["seed"], integer=True, nonneg=True)

    # devices
    draw = raw.get("devices", {}) or {}
    _check_keys(draw, {"count", "a_range", "mu_range", "data_range", "profiles"}, "devices")
    devices = DevicesConfig()
    if "a_range" in draw:
        devices.a_range = _range("devices.a_range", draw["a_range"], positive=True)
    if "mu_range" in draw:
        devices.mu_range = _range("devices.mu_range", draw["mu_range"], positive=True)
    if "data_range" in draw:
        devices.data_range = _range("devices.data_range", draw["data_range"], integer=True, positive=True)

    # jobs
    jraw = raw.get("jobs")
    if not isinstance(jraw, list) or not jraw:
        raise ConfigError("jobs", "expected a non-empty list of jobs")
    num_jobs = len(jraw)

    if draw.get("profiles") is not None:
        profiles = draw["profiles"]
        if not isinstance(profiles, list) or not profiles:
            raise ConfigError("devices.profiles", "expected a non-empty list")
        for i, prof in enumerate(profiles):
            p = f"devices.profiles[{i}]"
            _check_keys(prof, {"a", "mu", "data_sizes"}, p)
            for key in ("a", "mu", "data_sizes"):
                if key not in prof:
                    raise ConfigError(f"{p}.{key}", "required")
            _number(f"{p}.a", prof["a"], positive=True)
            _number(f"{p}.mu", prof["mu"], positive=True)
            sizes = prof["data_sizes"]
            if not isinstance(sizes, list) or len(sizes) != num_jobs:
                raise ConfigError(f"{p}.data_sizes", f"expected one size per job ({num_jobs})")
            for j, s in enumerate(sizes):
                _number(f"{p}.data_sizes[{j}]", s, integer=True, positive=True)
        devices.profiles = [
            {"a": float(p["a"]), "mu": float(p["mu"]), "data_sizes": [int(s) for s in p["data_sizes"]]}
            for p in profiles
        ]
        if "count" in draw and int(draw["count"]) != len(profiles):
            raise ConfigError("devices.count", "does not match the number of profiles")
        devices.count = len(profiles)
    else:
        devices.count = _number("devices.count", draw.get("count", 100), integer=True, positive=True)

    # surrogate
    sraw = raw.get("surrogate", {}) or {}
    _check_keys(sraw, {"lambda", "curve_ranges"}, "surrogate")
    surrogate = SurrogateConfig()
    if "lambda" in sraw:
        surrogate.lam = _number("surrogate.lambda", sraw["lambda"], nonneg=True)
    if "curve_ranges" in sraw:
        cr = sraw["curve_ranges"]
        _check_keys(cr, {"b0", "b1", "b2"}, "surrogate.curve_ranges")
        ranges = CurveRanges()
        if "b0" in cr:
            ranges.b0 = _range("surrogate.curve_ranges.b0", cr["b0"], positive=True)
        if "b1" in cr:
            ranges.b1 = _range("surrogate.curve_ranges.b1", cr["b1"], nonneg=True)
        if "b2" in cr:
            ranges.b2 = _range("surrogate.curve_ranges.b2", cr["b2"], nonneg=True)
        surrogate.curve_ranges = ranges

    curve_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    jobs = []
    for m, job in enumerate(jraw):
        p = f"jobs[{m}]"
        job = job or {}
        _check_keys(job, {"local_epochs", "participation", "target_loss", "curve", "max_rounds"}, p)
        drawn = tuple(float(curve_rng.uniform(*r)) for r in
                      (surrogate.curve_ranges.b0, surrogate.curve_ranges.b1, surrogate.curve_ranges.b2))
        if "curve" in job:
            c = job["curve"]
            if not isinstance(c, (list, tuple)) or len(c) != 3:
                raise ConfigError(f"{p}.curve", "expected [b0, b1, b2]")
            curve = (
                _number(f"{p}.curve[0]", c[0], positive=True),
                _number(f"{p}.curve[1]", c[1], nonneg=True),
                _number(f"{p}.curve[2]", c[2], nonneg=True),
            )
        else:
            curve = drawn
        tau = _number(f"{p}.local_epochs", job.get("local_epochs", 5), integer=True, positive=True)
        ratio = _number(f"{p}.participation", job.get("participation", 0.1), unit=True)
        target = _number(f"{p}.target_loss", job.get("target_loss", loss_at(curve, DEFAULT_TARGET_ROUNDS)),
                         positive=True)
        if "max_rounds" in job:
            rounds = _number(f"{p}.max_rounds", job["max_rounds"], integer=True, positive=True)
        else:
            if target <= curve[2]:
                raise ConfigError(f"{p}.target_loss",
                                  f"{target} is not above the curve asymptote {curve[2]}; set max_rounds")
            rounds = estimate_rounds(curve, target)
        try:
            jobs.append(JobSpec(m, tau, ratio, target, curve, rounds))
        except InvariantViolation as exc:
            raise ConfigError(p, str(exc)) from exc

    # scheduler
    sch = raw.get("scheduler", {}) or {}
    if isinstance(sch, str):
        sch = {"name": sch}
    _check_keys(sch, {"name", "genetic", "bods", "rlds", "checkpoint"}, "scheduler")
    scheduler = SchedulerConfig()
    scheduler.name = sch.get("name", "random")
    _check_choice("scheduler.name", scheduler.name, SCHEDULERS)
    scheduler.genetic = _params(GeneticParams, sch.get("genetic", {}) or {}, "scheduler.genetic", {
        "population": _pos_int, "generations": lambda p, v: _number(p, v, integer=True, nonneg=True),
        "tournament": _pos_int, "mutation": _prob,
        "elitism": lambda p, v: _number(p, v, integer=True, nonneg=True),
    })
    scheduler.bods = _params(BodsParams, sch.get("bods", {}) or {}, "scheduler.bods", {
        "candidates": _pos_int, "init_points": _pos_int, "length_scale": _opt_pos,
        "length_scale_factor": _pos,
        "max_observations": _pos_int, "refit": _flag, "refresh": _flag,
    })
    scheduler.rlds = _params(RldsParams, sch.get("rlds", {}) or {}, "scheduler.rlds", {
        "hidden": _pos_int, "lr": _pos, "online_lr": lambda p, v: _number(p, v, nonneg=True), "gamma": _prob, "epsilon": _prob, "pretrain_epsilon": _prob,
        "pretrain_rounds": lambda p, v: _number(p, v, integer=True, nonneg=True),
        "pretrain_n": _pos_int, "clip_norm": _pos,
        "optimizer": lambda p, v: _check_choice(p, v, ("adam", "sgd")) or v,
        "eval_every": lambda p, v: None if v is None else _pos_int(p, v),
        "eval_rounds": _pos_int,
    })
    if scheduler.rlds.pretrain_n < 2:
        raise ConfigError("scheduler.rlds.pretrain_n", "pre-training needs at least 2 plans per round")
    if sch.get("checkpoint") is not None:
        ckpt = Path(str(sch["checkpoint"]))
        if base_dir is not None and not ckpt.is_absolute():
            ckpt = base_dir / ckpt
        scheduler.checkpoint = str(ckpt)

    wraw = raw.get("weights", {}) or {}
    _check_keys(wraw, {"alpha", "beta"}, "weights")
    alpha = _number("weights.alpha", wraw.get("alpha", 1.0), nonneg=True)
    beta = _number("weights.beta", wraw.get("beta", 1.0), nonneg=True)
    if alpha + beta <= 0:
        raise ConfigError("weights", "alpha + beta must be positive")
    weights = CostWeights(alpha, beta)

    eraw = raw.get("engine", {}) or {}
    _check_keys(eraw, {"release", "contention"}, "engine")
    engine = EngineConfig(eraw.get("release", "per_device"), eraw.get("contention", "defer"))
    _check_choice("engine.release", engine.release, RELEASE_MODES)
    _check_choice("engine.contention", engine.contention, CONTENTION_MODES)

    for job in jobs:
        if job.n_devices(devices.count) > devices.count:
            raise ConfigError(f"jobs[{job.job}].participation", "schedules more devices than exist")

    output = str(raw.get("output", "out"))
    return ExperimentConfig(seed, devices, jobs, scheduler, weights, surrogate, engine, output)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raise ConfigError("", f"{path} is empty")
    return parse_config(raw, base_dir=path.parent)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def build_profiles(config: ExperimentConfig, rng: np.random.Generator) -> list[DeviceProfile]:
    if config.devices.profiles is not None:
        return [DeviceProfile(k, p["a"], p["mu"], tuple(p["data_sizes"]))
                for k, p in enumerate(config.devices.profiles)]
    d = config.devices
    return generate_population(d.count, config.num_jobs, rng, d.a_range, d.mu_range, d.data_range)
