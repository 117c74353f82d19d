"""Loss-weight warmup and learning-rate decay schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleConfig:
    t_total: int
    lr0_cnn: float = 5e-4
    lr0_attn: float = 1e-4
    poly_power: float = 0.9
    w_cl: float = 1e-3

    def __post_init__(self) -> None:
        if self.t_total <= 0:
            raise ValueError("t_total must be positive")
        if self.lr0_cnn <= 0 or self.lr0_attn <= 0:
            raise ValueError("learning rates must be positive")


def cps_weight(t: int | float, t_total: int) -> float:
    """Gaussian warmup 0.1 * exp(-5 * (1 - t/t_total)^2), defined on [0, t_total]."""
    if not 0 <= t <= t_total:
        raise ValueError(f"t={t} outside [0, {t_total}]")
    frac = t / t_total
    return 0.1 * math.exp(-5.0 * (1.0 - frac) ** 2)


def poly_lr(t: int | float, t_total: int, lr0: float, power: float = 0.9) -> float:
    """Polynomial decay lr0 * (1 - t/t_total)^power, defined on [0, t_total)."""
    if not 0 <= t < t_total:
        raise ValueError(f"t={t} outside [0, {t_total})")
    return lr0 * (1.0 - t / t_total) ** power
