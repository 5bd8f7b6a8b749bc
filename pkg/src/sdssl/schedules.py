"""Scalar training schedules: distillation ratio, learning rate, EMA momentum.

All schedules are pure functions of (step, config); resuming a run at any
step reproduces the exact same values.
"""

import dataclasses
import math
from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass(frozen=True)
class ScheduleConfig:
    """Run-level schedule constants, independent of dataset size."""

    epochs: int = 50
    warmup_fraction: float = 0.1
    base_lr: float = 1.5e-4
    weight_decay: float = 0.1
    alpha_max: float = 0.6
    anneal_alpha: bool = True
    ema_base: float = 0.99
    ema_final: float = 1.0

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError(f"schedule.epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigurationError(
                f"schedule.warmup_fraction must be in [0, 1), got {self.warmup_fraction}"
            )
        if self.base_lr <= 0:
            raise ConfigurationError(f"schedule.base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"schedule.weight_decay must be >= 0, got {self.weight_decay}")
        if self.alpha_max < 0:
            raise ConfigurationError(f"schedule.alpha_max must be >= 0, got {self.alpha_max}")
        if not 0.0 <= self.ema_base < 1.0:
            raise ConfigurationError(f"schedule.ema_base must be in [0, 1), got {self.ema_base}")
        if not self.ema_base < self.ema_final <= 1.0:
            raise ConfigurationError(
                f"schedule.ema_final must be in (ema_base, 1], got {self.ema_final}"
            )


@dataclass(frozen=True)
class ScheduleState:
    """Schedule constants plus the current step."""

    step: int
    total_steps: int
    warmup_steps: int
    alpha_max: float
    base_lr: float
    anneal_alpha: bool = True
    ema_base: float = 0.99
    ema_final: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.step <= self.total_steps:
            raise ConfigurationError(
                f"step must be in [0, total_steps={self.total_steps}], got {self.step}"
            )
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError(
                f"warmup_steps must be in [0, total_steps), got {self.warmup_steps}"
            )

    def at(self, step: int) -> "ScheduleState":
        return dataclasses.replace(self, step=step)


def build_state(config: ScheduleConfig, steps_per_epoch: int) -> ScheduleState:
    config.validate()
    total = config.epochs * steps_per_epoch
    warmup = min(int(round(config.warmup_fraction * total)), total - 1)
    return ScheduleState(
        step=0,
        total_steps=total,
        warmup_steps=warmup,
        alpha_max=config.alpha_max,
        base_lr=config.base_lr,
        anneal_alpha=config.anneal_alpha,
        ema_base=config.ema_base,
        ema_final=config.ema_final,
    )


def alpha_at(state: ScheduleState) -> float:
    """Distillation weight: half-cosine ramp 0 -> alpha_max (constant when annealing is off)."""
    if not state.anneal_alpha:
        return state.alpha_max
    ramp = (1.0 - math.cos(math.pi * state.step / state.total_steps)) / 2.0
    return state.alpha_max * ramp


def lr_at(state: ScheduleState) -> float:
    """Linear warmup 0 -> base_lr, then cosine decay base_lr -> 0."""
    t = state.step
    if t < state.warmup_steps:
        return state.base_lr * t / state.warmup_steps
    progress = (t - state.warmup_steps) / (state.total_steps - state.warmup_steps)
    return state.base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0


def ema_momentum_at(state: ScheduleState) -> float:
    """Teacher momentum: cosine increase ema_base -> ema_final."""
    ramp = (1.0 - math.cos(math.pi * state.step / state.total_steps)) / 2.0
    return state.ema_base + (state.ema_final - state.ema_base) * ramp
