"""
Learning-rate schedules: linear warmup then cosine, linear or constant.
"""

import math
from dataclasses import dataclass

from src.core.errors import ConfigError, UsageError

SCHEDULE_KINDS = ("cosine", "linear", "constant")


@dataclass(frozen=True)
class Schedule:
    kind: str
    base_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got '{self.kind}'")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be non-negative")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at `step` in [0, total_steps]."""
    if not 0 <= step <= schedule.total_steps:
        raise UsageError(f"step {step} outside [0, {schedule.total_steps}]")
    base, low = schedule.base_lr, schedule.min_lr
    warmup = schedule.warmup_steps
    if step < warmup:
        return base * step / warmup
    if schedule.kind == "constant":
        return base
    span = schedule.total_steps - warmup
    if span == 0:
        return base
    tau = (step - warmup) / span
    if schedule.kind == "cosine":
        return low + (base - low) * (1.0 + math.cos(math.pi * tau)) / 2.0
    return base + (low - base) * tau
