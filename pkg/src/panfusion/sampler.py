"""Ancestral and respaced deterministic reverse-process steps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import NoisyState, Prediction, to_epsilon, to_x0
from .schedule import NoiseSchedule, posterior_variance

log = logging.getLogger(__name__)

# slack for 1 - alpha_bar_prev - sigma^2 going fractionally negative in fp
_COEF_SLACK = 1e-12


@dataclass
class SamplerPlan:
    """A reverse trajectory: visited steps (increasing, ending at T),
    stochasticity eta, and the step rule."""

    tau: list[int]
    eta: float = 0.0
    kind: str = "ddim"

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not self.tau:
            raise ValueError("tau is empty")
        if any(b <= a for a, b in zip(self.tau, self.tau[1:])):
            raise ValueError("tau must be strictly increasing")
        if self.tau[0] < 1:
            raise ValueError("tau must start at 1 or later")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")

    def check_against(self, schedule: NoiseSchedule) -> None:
        if self.tau[-1] != schedule.timesteps:
            raise ValueError(
                f"tau must end at T={schedule.timesteps}, got {self.tau[-1]}"
            )
        if self.kind == "ddpm" and self.tau != list(range(1, schedule.timesteps + 1)):
            raise ValueError("ddpm stepping requires the full trajectory 1..T")


def make_plan(timesteps: int, steps: int = 25, eta: float = 0.0,
              kind: str = "ddim") -> SamplerPlan:
    """Uniform-stride respacing of [1..T] with the last step pinned at T."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    tau = sorted({max(1, round(i * timesteps / steps)) for i in range(1, steps + 1)})
    return SamplerPlan(tau=tau, eta=eta, kind=kind)


def ddpm_step(state: NoisyState, pred: Prediction, schedule: NoiseSchedule,
              noise=None):
    """One ancestral step t -> t-1; posterior noise is skipped at t == 1."""
    t = int(state.t)
    eps = to_epsilon(pred, state, schedule)
    alpha = schedule.alpha_at(t)
    beta = schedule.beta_at(t)
    ab = schedule.alpha_bar_at(t)
    mean = (state.x_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    if noise is None:
        raise ValueError("noise is required for t > 1")
    return mean + math.sqrt(posterior_variance(schedule, t)) * noise


def ddim_step(state: NoisyState, pred: Prediction, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0, noise=None):
    """One respaced step t -> t_prev; deterministic when eta == 0."""
    t = int(state.t)
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must be in [0, {t})")
    ab = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    x0_hat = to_x0(pred, state, schedule)
    eps_hat = to_epsilon(pred, state, schedule)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) \
        * math.sqrt(1.0 - ab / ab_prev)
    coef = 1.0 - ab_prev - sigma * sigma
    if coef < -_COEF_SLACK:
        raise ValueError(f"negative direction coefficient {coef} (eta={eta})")
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(coef, 0.0)) * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("noise is required when eta > 0")
        out = out + sigma * noise
    return out


def sample(denoise_fn: Callable[[np.ndarray, int], Prediction],
           shape: tuple[int, ...], plan: SamplerPlan, schedule: NoiseSchedule,
           seed: int = 0, base: np.ndarray | None = None,
           range_hint: tuple[float, float] | None = None) -> np.ndarray:
    """Run the reverse process from seeded unit noise.

    ``denoise_fn(x_t, t)`` returns a tagged Prediction.  When ``base`` is
    given the sampled field is treated as a residual on top of it, and the
    sum is clipped to ``range_hint``; the residual itself is never clipped.
    """
    plan.check_against(schedule)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    tau = plan.tau
    for i in range(len(tau) - 1, -1, -1):
        t = tau[i]
        t_prev = tau[i - 1] if i > 0 else 0
        pred = denoise_fn(x, t)
        state = NoisyState(x_t=x, t=t)
        if plan.kind == "ddpm":
            noise = None
            if t > 1:
                noise = rng.standard_normal(shape).astype(np.float32)
            x = ddpm_step(state, pred, schedule, noise)
        else:
            noise = None
            if plan.eta > 0.0:
                noise = rng.standard_normal(shape).astype(np.float32)
            x = ddim_step(state, pred, t_prev, schedule, plan.eta, noise)
    x = np.asarray(x, dtype=np.float32)
    if base is None:
        return x
    log.debug("sampled residual range [%.4f, %.4f]", float(x.min()), float(x.max()))
    fused = x + np.asarray(base, dtype=np.float32)
    if range_hint is not None:
        fused = np.clip(fused, range_hint[0], range_hint[1])
    return fused
