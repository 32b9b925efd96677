"""Forward noising, prediction parameterizations, and the training loss.

Array arguments may be numpy arrays or torch tensors; only arithmetic
operators and scalar coefficients are used, so both work through one code
path.  Vectorized per-sample steps (``t`` given as an integer array) are
supported for batched 4D numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .schedule import ALPHA_BAR_FLOOR, NoiseSchedule

PREDICTION_KINDS = ("epsilon", "x0", "v")


@dataclass
class NoisyState:
    """A noised sample x_t together with the step and the noise used."""

    x_t: Any
    t: Any
    noise: Any = None


@dataclass
class Prediction:
    """Tagged network output; ``kind`` is one of epsilon / x0 / v."""

    kind: str
    value: Any

    def __post_init__(self):
        if self.kind not in PREDICTION_KINDS:
            raise ValueError(f"unknown prediction kind {self.kind!r}")


def _alpha_bar(schedule: NoiseSchedule, t) -> Any:
    if isinstance(t, (int, np.integer)):
        return schedule.alpha_bar_at(int(t))
    t = np.asarray(t)
    if t.ndim != 1:
        raise ValueError(f"t must be a scalar or 1D array, got shape {t.shape}")
    if t.min() < 0 or t.max() > schedule.timesteps:
        raise ValueError(f"t outside [0, {schedule.timesteps}]")
    # broadcast per-sample coefficients over (B, C, H, W) batches
    return schedule.alpha_bar[t].reshape(-1, 1, 1, 1)


def _sqrt(x) -> Any:
    return math.sqrt(x) if isinstance(x, float) else np.sqrt(x)


def q_sample(x0, t, noise, schedule: NoiseSchedule) -> NoisyState:
    """Draw x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise from the forward chain."""
    ab = _alpha_bar(schedule, t)
    x_t = _sqrt(ab) * x0 + _sqrt(1.0 - ab) * noise
    return NoisyState(x_t=x_t, t=t, noise=noise)


def single_forward_step(x_prev, t, noise, schedule: NoiseSchedule):
    """One forward transition: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    beta = schedule.beta_at(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def make_v(x0, noise, t, schedule: NoiseSchedule) -> Prediction:
    """Velocity target v = sqrt(ab_t) noise - sqrt(1 - ab_t) x0."""
    ab = _alpha_bar(schedule, t)
    return Prediction(kind="v", value=_sqrt(ab) * noise - _sqrt(1.0 - ab) * x0)


def to_x0(pred: Prediction, state: NoisyState, schedule: NoiseSchedule):
    """Recover the clean-sample estimate implied by a prediction at state.t."""
    ab = _alpha_bar(schedule, state.t)
    if pred.kind == "x0":
        return pred.value
    if pred.kind == "epsilon":
        if np.min(ab) < ALPHA_BAR_FLOOR:
            raise ValueError(f"alpha_bar {ab} below floor {ALPHA_BAR_FLOOR}")
        return (state.x_t - _sqrt(1.0 - ab) * pred.value) / _sqrt(ab)
    return _sqrt(ab) * state.x_t - _sqrt(1.0 - ab) * pred.value


def to_epsilon(pred: Prediction, state: NoisyState, schedule: NoiseSchedule):
    """Recover the noise estimate implied by a prediction at state.t."""
    ab = _alpha_bar(schedule, state.t)
    if pred.kind == "epsilon":
        return pred.value
    if pred.kind == "x0":
        if np.min(1.0 - ab) < ALPHA_BAR_FLOOR:
            raise ValueError(f"1 - alpha_bar {1.0 - ab} below floor {ALPHA_BAR_FLOOR}")
        return (state.x_t - _sqrt(ab) * pred.value) / _sqrt(1.0 - ab)
    return _sqrt(1.0 - ab) * state.x_t + _sqrt(ab) * pred.value


def simple_loss(value, target, loss: str = "l1"):
    """Mean elementwise reconstruction penalty; l1 by default, l2 optional."""
    diff = value - target
    if loss == "l1":
        return abs(diff).mean()
    if loss == "l2":
        return (diff * diff).mean()
    raise ValueError(f"unknown loss {loss!r}")
