"""Domain types shared by the simulator and all schedulers.

Device and job identifiers are plain ``int`` indices (``0 <= k < K`` and
``0 <= m < M``). Everything here is immutable; updates return new values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvariantViolation

DeviceId = int
JobId = int


def participants(ratio: float, num_devices: int) -> int:
    """Number of devices a job schedules per round, ``round_half_up(C*K)``, at least 1."""
    return max(1, int(math.floor(ratio * num_devices + 0.5)))


@dataclass(frozen=True)
class JobSpec:
    """Static description of one FL job.

    Attributes:
        job: Job index.
        local_epochs: Local epochs per round (tau).
        participation: Fraction of all devices scheduled per round (C).
        target_loss: Loss at which the job is considered finished.
        curve: Loss-curve coefficients ``(b0, b1, b2)``.
        max_rounds: Hard round cap.
    """

    job: JobId
    local_epochs: int
    participation: float
    target_loss: float
    curve: tuple[float, float, float]
    max_rounds: int

    def __post_init__(self):
        if self.local_epochs < 1:
            raise InvariantViolation(f"job {self.job}: local_epochs must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise InvariantViolation(f"job {self.job}: participation must be in (0, 1]")
        if self.target_loss <= 0:
            raise InvariantViolation(f"job {self.job}: target_loss must be positive")
        b0, b1, b2 = self.curve
        if b0 <= 0 or b1 < 0 or b2 < 0:
            raise InvariantViolation(f"job {self.job}: curve needs b0 > 0 and b1, b2 >= 0")
        if self.max_rounds < 1:
            raise InvariantViolation(f"job {self.job}: max_rounds must be >= 1")

    def n_devices(self, num_devices: int) -> int:
        return participants(self.participation, num_devices)


@dataclass(frozen=True)
class SchedulingPlan:
    """Devices assigned to ``job`` for ``round``; stored as a sorted tuple."""

    job: JobId
    round: int
    devices: tuple[DeviceId, ...]

    def __post_init__(self):
        devs = tuple(int(d) for d in self.devices)
        if len(set(devs)) != len(devs):
            raise InvariantViolation(f"plan for job {self.job} has duplicate devices: {devs}")
        if any(d < 0 for d in devs):
            raise InvariantViolation(f"negative device index in {devs}")
        object.__setattr__(self, "devices", tuple(sorted(devs)))

    def __len__(self) -> int:
        return len(self.devices)

    def __contains__(self, device: object) -> bool:
        return device in self.devices


@dataclass(frozen=True, eq=False)
class FrequencyMatrix:
    """Per-job, per-device scheduling counts ``s[m, k]``.

    The backing array is read-only; :func:`update_frequency` returns a new matrix.
    """

    counts: np.ndarray

    def __post_init__(self):
        arr = np.array(self.counts, dtype=np.int64)
        if arr.ndim != 2:
            raise InvariantViolation("frequency matrix must be 2-D (jobs x devices)")
        if (arr < 0).any():
            raise InvariantViolation("frequency counts must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @classmethod
    def zeros(cls, num_jobs: int, num_devices: int) -> FrequencyMatrix:
        return cls(np.zeros((num_jobs, num_devices), dtype=np.int64))

    @property
    def num_jobs(self) -> int:
        return self.counts.shape[0]

    @property
    def num_devices(self) -> int:
        return self.counts.shape[1]

    def row(self, job: JobId) -> np.ndarray:
        return self.counts[job]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrequencyMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def update_frequency(freq: FrequencyMatrix, plan: SchedulingPlan) -> FrequencyMatrix:
    """Add one to ``s[plan.job, k]`` for every scheduled device ``k``."""
    devices = list(plan.devices)
    if len(set(devices)) != len(devices):
        raise InvariantViolation(f"duplicate device in plan {devices}")
    if devices and max(devices) >= freq.num_devices:
        raise InvariantViolation(f"device index out of range for K={freq.num_devices}")
    counts = freq.counts.copy()
    counts[plan.job, devices] += 1
    return FrequencyMatrix(counts)


def encode_plan(plan: SchedulingPlan, num_devices: int) -> np.ndarray:
    """Dense 0/1 vector of length ``num_devices`` with ones at scheduled devices."""
    if len(plan.devices) == 0:
        raise InvariantViolation("a plan must schedule at least one device")
    if plan.devices[-1] >= num_devices:
        raise InvariantViolation(
            f"device {plan.devices[-1]} out of range for K={num_devices}"
        )
    bits = np.zeros(num_devices, dtype=np.int8)
    bits[list(plan.devices)] = 1
    return bits


def decode_plan(bits: Sequence[int] | np.ndarray, job: JobId = 0, round: int = 0) -> SchedulingPlan:
    arr = np.asarray(bits)
    if arr.ndim != 1 or not np.isin(arr, (0, 1)).all():
        raise InvariantViolation("plan encoding must be a 0/1 vector")
    return SchedulingPlan(job, round, tuple(int(i) for i in np.flatnonzero(arr)))


def plans_to_bits(device_sets: Iterable[Sequence[int]], num_devices: int) -> np.ndarray:
    """Stack several device sets into an ``(n, K)`` 0/1 matrix."""
    sets = list(device_sets)
    out = np.zeros((len(sets), num_devices), dtype=np.int8)
    for i, devs in enumerate(sets):
        out[i, list(devs)] = 1
    return out
