"""Squared-cosine noise schedule and posterior variance tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# keeps sqrt(1 - alpha_bar) and divisions by alpha_bar finite at the last step
ALPHA_BAR_FLOOR = 1e-8
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed float64 tables for a discrete-time diffusion.

    ``alpha_bar`` has ``timesteps + 1`` entries indexed directly by t
    (``alpha_bar[0] == 1``).  ``beta`` and ``alpha`` have ``timesteps``
    entries where index ``i`` belongs to step ``t = i + 1``.
    """

    timesteps: int
    offset: float
    alpha_bar: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"step t={t} outside [1, {self.timesteps}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"step t={t} outside [0, {self.timesteps}]")
        return float(self.alpha_bar[t])


def cosine_schedule(timesteps: int = 500, offset: float = 8e-3) -> NoiseSchedule:
    """Build the squared-cosine schedule.

    alpha_bar(t) = [f(t) / f(0)]^2 with f(t) = cos(((t/T + offset) /
    (1 + offset)) * pi/2).  Betas are derived from consecutive alpha_bar
    ratios and clipped at 0.999; the final alpha_bar is floored at 1e-8.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < offset < 1.0:
        raise ValueError(f"offset must be in (0, 1), got {offset}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((t / timesteps + offset) / (1.0 + offset)) * np.pi / 2.0)
    alpha_bar = np.square(f / f[0])
    alpha_bar = np.maximum(alpha_bar, ALPHA_BAR_FLOOR)
    beta = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], BETA_MAX)
    alpha = 1.0 - beta
    if alpha_bar[0] != 1.0:
        raise ValueError("alpha_bar[0] must be exactly 1")
    if not np.all(np.diff(alpha_bar) < 0.0):
        raise ValueError("alpha_bar must be strictly decreasing")
    if not (np.all(beta > 0.0) and np.all(beta <= BETA_MAX)):
        raise ValueError("beta outside (0, 0.999]")
    return NoiseSchedule(timesteps=timesteps, offset=offset,
                         alpha_bar=alpha_bar, beta=beta, alpha=alpha)


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    """Variance of q(x_{t-1} | x_t, x_0); zero at t=1."""
    t = schedule._check_t(t)
    ab_prev = schedule.alpha_bar[t - 1]
    ab = schedule.alpha_bar[t]
    return float((1.0 - ab_prev) / (1.0 - ab) * schedule.beta[t - 1])
