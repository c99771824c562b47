"""Noise schedules shared by the categorical and Gaussian diffusion stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "cosine_schedule", "constant_beta_schedule"]

_BETA_CLIP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates beta_1..beta_T and cumulative alpha-bars.

    alpha_bars[t-1] = prod_{tau<=t} (1 - beta_tau); step indices are 1-based
    throughout, with alpha_bar_of(schedule, 0) == 1 by convention.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        bars = np.cumprod(1.0 - betas)
        if self.alpha_bars is None:
            object.__setattr__(self, "alpha_bars", bars)
        else:
            given = np.asarray(self.alpha_bars, dtype=np.float64)
            if given.shape != bars.shape or np.max(np.abs(given - bars)) > 1e-12:
                raise ValueError("alpha_bars inconsistent with betas")
            object.__setattr__(self, "alpha_bars", given)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return alpha_bar_of(self, t)


def alpha_bar_of(schedule: NoiseSchedule, t: int) -> float:
    """Cumulative product at step t; the empty product at t=0 is 1."""
    if t == 0:
        return 1.0
    if not 1 <= t <= schedule.T:
        raise IndexError(f"timestep {t} outside 0..{schedule.T}")
    return float(schedule.alpha_bars[t - 1])


def cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine alpha-bar schedule with betas clipped to (0, 0.999]."""
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    if offset <= 0:
        raise ValueError("offset must be positive")

    def f(u: float) -> float:
        return math.cos(((u / T + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2

    f0 = f(0.0)
    bars = np.array([f(t) / f0 for t in range(T + 1)])
    betas = 1.0 - bars[1:] / bars[:-1]
    betas = np.clip(betas, None, _BETA_CLIP)
    return NoiseSchedule(betas=betas, alpha_bars=None)


def constant_beta_schedule(T: int, beta: float) -> NoiseSchedule:
    """Flat schedule, mostly for tests and enumeration oracles."""
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    return NoiseSchedule(betas=np.full(T, float(beta)), alpha_bars=None)
