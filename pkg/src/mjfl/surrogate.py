"""Loss-curve surrogate standing in for real federated training.

Loss after ``E`` effective rounds is ``1 / (b0*E + b1) + b2``. Each executed
round adds ``1 / (1 + lam * fairness)`` effective rounds, so unevenly spread
participation slows convergence. The coupling form is a simulator choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .core import JobId, JobSpec
from .errors import InvariantViolation, UnreachableTargetError

INFLATION = 1.3


def loss_at(curve: tuple[float, float, float], effective_rounds: float) -> float:
    b0, b1, b2 = curve
    return 1.0 / (b0 * effective_rounds + b1) + b2


def rounds_to_reach(curve: tuple[float, float, float], target: float) -> int:
    """Smallest whole number of ideal rounds whose loss is at most ``target``."""
    b0, b1, b2 = curve
    if target <= b2:
        raise UnreachableTargetError(f"target {target} is at or below the asymptote {b2}")
    return max(0, math.ceil(((1.0 / (target - b2)) - b1) / b0))


def estimate_rounds(curve: tuple[float, float, float], target: float) -> int:
    """Round cap with a 30% margin over the curve estimate, at least 1."""
    return max(1, math.ceil(INFLATION * rounds_to_reach(curve, target)))


@dataclass(frozen=True)
class JobProgress:
    job: JobId
    curve: tuple[float, float, float]
    target_loss: float
    max_rounds: int
    effective_rounds: float = 0.0
    completed_rounds: int = 0

    @classmethod
    def start(cls, spec: JobSpec) -> JobProgress:
        return cls(spec.job, spec.curve, spec.target_loss, spec.max_rounds)

    @property
    def current_loss(self) -> float:
        return loss_at(self.curve, self.effective_rounds)

    @property
    def done(self) -> bool:
        return self.current_loss <= self.target_loss or self.completed_rounds >= self.max_rounds


def progress_increment(fairness: float, lam: float) -> float:
    return 1.0 / (1.0 + lam * fairness)


def advance(progress: JobProgress, fairness: float, lam: float = 1.0) -> JobProgress:
    """Account for one executed round with the given fairness variance."""
    if progress.done:
        raise InvariantViolation(f"job {progress.job} is already done")
    if fairness < 0 or lam < 0:
        raise InvariantViolation("fairness and lambda must be non-negative")
    return replace(
        progress,
        effective_rounds=progress.effective_rounds + progress_increment(fairness, lam),
        completed_rounds=progress.completed_rounds + 1,
    )
