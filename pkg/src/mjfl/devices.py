"""Heterogeneous device capabilities and per-round execution time.

A device's round time for a job is a shifted exponential: a deterministic
floor ``tau * a * D`` plus an exponential tail with rate ``mu / (tau * D)``.
Computation and communication are folded into the single pair ``(a, mu)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DeviceId, JobId, JobSpec
from .errors import InvariantViolation


@dataclass(frozen=True)
class DeviceProfile:
    """Capability parameters of one device.

    Attributes:
        device: Device index.
        a: Per-sample shift coefficient (minutes per epoch-sample).
        mu: Fluctuation rate parameter.
        data_sizes: Local dataset size for each job.
    """

    device: DeviceId
    a: float
    mu: float
    data_sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.a > 0 or not self.mu > 0:
            raise InvariantViolation(f"device {self.device}: a and mu must be positive")
        sizes = tuple(int(d) for d in self.data_sizes)
        if not sizes or min(sizes) < 1:
            raise InvariantViolation(f"device {self.device}: data sizes must be >= 1")
        object.__setattr__(self, "data_sizes", sizes)

    def shift(self, job: JobSpec) -> float:
        return job.local_epochs * self.a * self.data_sizes[job.job]

    def rate(self, job: JobSpec) -> float:
        return self.mu / (job.local_epochs * self.data_sizes[job.job])


@dataclass(frozen=True)
class TimeSample:
    job: JobId
    device: DeviceId
    round: int
    t: float


def sample_time(
    profile: DeviceProfile, job: JobSpec, rng: np.random.Generator, round: int = 0
) -> TimeSample:
    """Draw one round time for ``profile`` running ``job``."""
    t = profile.shift(job) + rng.exponential(1.0 / profile.rate(job))
    return TimeSample(job.job, profile.device, round, float(t))


def sample_times(
    profiles: Sequence[DeviceProfile],
    devices: Sequence[DeviceId],
    job: JobSpec,
    rng: np.random.Generator,
    round: int = 0,
) -> list[TimeSample]:
    """Draw round times for several devices from one stream, in the given order."""
    return [sample_time(profiles[k], job, rng, round) for k in devices]


def expected_time(profile: DeviceProfile, job: JobSpec) -> float:
    """Closed-form mean ``tau*a*D + tau*D/mu``."""
    return profile.shift(job) + 1.0 / profile.rate(job)


def expected_times(profiles: Sequence[DeviceProfile], job: JobSpec) -> np.ndarray:
    return np.array([expected_time(p, job) for p in profiles])


def time_cdf(t, profile: DeviceProfile, job: JobSpec):
    """``P[t_k < t]`` for the shifted exponential; zero below the shift."""
    t = np.asarray(t, dtype=float)
    z = np.maximum(t - profile.shift(job), 0.0)
    return -np.expm1(-profile.rate(job) * z)


def generate_population(
    num_devices: int,
    num_jobs: int,
    rng: np.random.Generator,
    a_range: tuple[float, float] = (0.001, 0.01),
    mu_range: tuple[float, float] = (1.0, 10.0),
    data_range: tuple[int, int] = (200, 1200),
) -> list[DeviceProfile]:
    """Sample a device population.

    ``a`` and ``mu`` are log-uniform over their ranges; dataset sizes are
    uniform integers over ``data_range`` (inclusive), independently per job.
    """
    a = np.exp(rng.uniform(np.log(a_range[0]), np.log(a_range[1]), num_devices))
    mu = np.exp(rng.uniform(np.log(mu_range[0]), np.log(mu_range[1]), num_devices))
    sizes = rng.integers(data_range[0], data_range[1], size=(num_devices, num_jobs), endpoint=True)
    return [
        DeviceProfile(k, float(a[k]), float(mu[k]), tuple(int(d) for d in sizes[k]))
        for k in range(num_devices)
    ]
