"""Discrete DDPM noise schedules.

Arrays are stored 1-indexed with a padding slot at index 0, so that
``beta[t]``, ``alpha[t]`` and ``alpha_bar[t]`` line up with the step
number ``t = 1..T``.  ``alpha_bar[0]`` is the empty product (1.0) and
``beta[0]`` is 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_BETA_MAX = 0.999


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, kind: str, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("need at least one beta")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        return cls(kind, _frozen(beta), _frozen(alpha), _frozen(alpha_bar))

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at t = 1."""
        _check_step(self, t, lo=1)
        ab, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        return float(self.beta[t] * (1.0 - ab_prev) / (1.0 - ab))


def _check_T(T) -> int:
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be an integer >= 1, got {T!r}")
    return int(T)


def _check_step(sched: NoiseSchedule, t, lo: int = 0) -> int:
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)):
        raise ScheduleError(f"step index must be an integer, got {t!r}")
    if not lo <= t <= sched.T:
        raise ScheduleError(f"step {t} outside [{lo}, {sched.T}]")
    return int(t)


def make_linear(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    T = _check_T(T)
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule.from_betas("linear", np.linspace(beta_start, beta_end, T))


def make_cosine(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule; betas are clipped to (0, 0.999] and alpha_bar is
    rebuilt from the clipped betas so the cumulative-product identity holds."""
    T = _check_T(T)
    if not (s > 0 and math.isfinite(s)):
        raise ScheduleError(f"cosine offset s must be a positive finite number, got {s!r}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
    ab = f / f[0]
    betas = 1.0 - ab[1:] / ab[:-1]
    betas = np.clip(betas, np.finfo(np.float64).tiny, COSINE_BETA_MAX)
    return NoiseSchedule.from_betas("cosine", betas)


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02, s: float = 0.008) -> NoiseSchedule:
    if kind == "linear":
        return make_linear(T, beta_start, beta_end)
    if kind == "cosine":
        return make_cosine(T, s)
    raise ScheduleError(f"unknown schedule kind {kind!r} (expected 'linear' or 'cosine')")


def alpha_bar(sched: NoiseSchedule, t: int) -> float:
    return float(sched.alpha_bar[_check_step(sched, t)])
