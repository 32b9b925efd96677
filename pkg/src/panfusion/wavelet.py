"""Single-level orthonormal Haar wavelet analysis and synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# orthonormal two-tap bank: lowpass (s, s), highpass (s, -s); a plain float
# coefficient keeps the input dtype (float32 stays float32)
_S = 1.0 / math.sqrt(2.0)


@dataclass
class WaveletBands:
    """Half-resolution subbands; first letter is the row filter, second the
    column filter (lh = lowpass rows, highpass columns)."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


def dwt_haar(x: np.ndarray) -> WaveletBands:
    """Analyze the last two axes into four stride-2 subbands.

    Both trailing dims must be even; leading axes (bands, batch) pass
    through untouched.
    """
    x = np.asarray(x)
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    lo_r = (x[..., 0::2, :] + x[..., 1::2, :]) * _S
    hi_r = (x[..., 0::2, :] - x[..., 1::2, :]) * _S
    return WaveletBands(
        ll=(lo_r[..., 0::2] + lo_r[..., 1::2]) * _S,
        lh=(lo_r[..., 0::2] - lo_r[..., 1::2]) * _S,
        hl=(hi_r[..., 0::2] + hi_r[..., 1::2]) * _S,
        hh=(hi_r[..., 0::2] - hi_r[..., 1::2]) * _S,
    )


def _interleave(even: np.ndarray, odd: np.ndarray, axis: int) -> np.ndarray:
    stacked = np.stack([even, odd], axis=axis if axis >= 0 else axis + even.ndim + 1)
    shape = list(even.shape)
    shape[axis] *= 2
    return stacked.reshape(shape)


def idwt_haar(bands: WaveletBands) -> np.ndarray:
    """Exact inverse of :func:`dwt_haar`."""
    lo_r = _interleave((bands.ll + bands.lh) * _S, (bands.ll - bands.lh) * _S, -1)
    hi_r = _interleave((bands.hl + bands.hh) * _S, (bands.hl - bands.hh) * _S, -1)
    return _interleave((lo_r + hi_r) * _S, (lo_r - hi_r) * _S, -2)
