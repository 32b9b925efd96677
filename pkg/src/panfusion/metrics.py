"""Reference and non-reference fusion quality measures.

All functions cast to float64 internally and expect band-major arrays of
shape (bands, height, width).  Reference metrics take the candidate first
and the reference second.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class UndefinedMetricError(ValueError):
    """The metric has no defined value for these inputs."""


@dataclass
class MetricConfig:
    scale_ratio: int = 4
    degrees: bool = True
    qnr_alpha: float = 1.0
    qnr_beta: float = 1.0
    uiqi_window: int = 32


def _as_bands(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (bands, h, w), got shape {x.shape}")
    return x


def _check_pair(x, ref):
    x, ref = _as_bands(x), _as_bands(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def sam(x, ref, degrees: bool = True) -> float:
    """Mean spectral angle between per-pixel band vectors.

    Pixels where either vector is exactly zero are skipped; if every pixel
    is skipped the angle is undefined.
    """
    x, ref = _check_pair(x, ref)
    dot = (x * ref).sum(axis=0)
    nx = np.sqrt((x * x).sum(axis=0))
    nr = np.sqrt((ref * ref).sum(axis=0))
    valid = (nx > 0) & (nr > 0)
    if not valid.any():
        raise UndefinedMetricError("all pixels have a zero band vector")
    cos = np.clip(dot[valid] / (nx[valid] * nr[valid]), -1.0, 1.0)
    angle = float(np.arccos(cos).mean())
    return math.degrees(angle) if degrees else angle


def ergas(x, ref, scale_ratio: int = 4) -> float:
    """Relative global dimensionless error: (100/c) sqrt(mean MSE_i/mu_i^2)."""
    x, ref = _check_pair(x, ref)
    mse = np.square(x - ref).mean(axis=(1, 2))
    mu = ref.mean(axis=(1, 2))
    if np.any(mu == 0.0):
        raise UndefinedMetricError("reference band with zero mean")
    return float(100.0 / scale_ratio * np.sqrt((mse / np.square(mu)).mean()))


def psnr(x, ref) -> float:
    """Peak signal-to-noise ratio in dB, averaged over bands.

    The peak is the reference band maximum.  A band reproduced exactly
    contributes +inf, which propagates through the average as a sentinel.
    """
    x, ref = _check_pair(x, ref)
    values = []
    for xb, rb in zip(x, ref):
        peak = float(rb.max())
        if peak <= 0.0:
            raise UndefinedMetricError("reference band maximum is not positive")
        mse = float(np.square(xb - rb).mean())
        values.append(math.inf if mse == 0.0 else 20.0 * math.log10(peak / math.sqrt(mse)))
    return float(np.mean(values))


_LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                       [1.0, -4.0, 1.0],
                       [0.0, 1.0, 0.0]])


def scc(x, ref) -> float:
    """Correlation between Laplacian-highpassed bands, averaged over bands.

    Bands whose filtered version has zero variance are skipped with a
    warning; if all bands are skipped the coefficient is undefined.
    """
    x, ref = _check_pair(x, ref)
    values = []
    for i, (xb, rb) in enumerate(zip(x, ref)):
        hx = ndimage.correlate(xb, _LAPLACIAN, mode="reflect")
        hr = ndimage.correlate(rb, _LAPLACIAN, mode="reflect")
        sx, sr = hx.std(), hr.std()
        if sx == 0.0 or sr == 0.0:
            warnings.warn(f"scc: band {i} has zero highpass variance, skipping")
            continue
        values.append(float(((hx - hx.mean()) * (hr - hr.mean())).mean() / (sx * sr)))
    if not values:
        raise UndefinedMetricError("all bands have zero highpass variance")
    return float(np.mean(values))


def ssim(x, ref, data_range: float = 1.0) -> float:
    """Structural similarity with the standard Gaussian window and constants."""
    x, ref = _check_pair(x, ref)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    taps = np.exp(-0.5 * np.square(np.arange(-5, 6) / 1.5))
    taps /= taps.sum()

    def smooth(img):
        out = ndimage.correlate1d(img, taps, axis=-2, mode="reflect")
        return ndimage.correlate1d(out, taps, axis=-1, mode="reflect")

    values = []
    for xb, rb in zip(x, ref):
        mx, mr = smooth(xb), smooth(rb)
        vxx = smooth(xb * xb) - mx * mx
        vrr = smooth(rb * rb) - mr * mr
        vxr = smooth(xb * rb) - mx * mr
        num = (2 * mx * mr + c1) * (2 * vxr + c2)
        den = (mx * mx + mr * mr + c1) * (vxx + vrr + c2)
        values.append(float((num / den).mean()))
    return float(np.mean(values))


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return ii[w:, w:] - ii[:-w, w:] - ii[w:, :-w] + ii[:-w, :-w]


def uiqi(a, b, window: int = 32) -> float:
    """Universal image quality index over all sliding windows of one band pair.

    Windows with a zero denominator are skipped; fully degenerate inputs are
    undefined.  The window must fit inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected matching 2D bands, got {a.shape} and {b.shape}")
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than image {a.shape}")
    n = float(window * window)
    sa, sb = _window_sums(a, window), _window_sums(b, window)
    saa, sbb = _window_sums(a * a, window), _window_sums(b * b, window)
    sab = _window_sums(a * b, window)
    mu_a, mu_b = sa / n, sb / n
    var_a = (saa - sa * mu_a) / (n - 1.0)
    var_b = (sbb - sb * mu_b) / (n - 1.0)
    cov = (sab - sa * mu_b) / (n - 1.0)
    den = (var_a + var_b) * (mu_a * mu_a + mu_b * mu_b)
    valid = den > 0.0
    if not valid.any():
        raise UndefinedMetricError("all windows degenerate")
    q = 4.0 * cov[valid] * mu_a[valid] * mu_b[valid] / den[valid]
    return float(q.mean())


def q_avg(x, ref, window: int = 32) -> float:
    """UIQI averaged over bands."""
    x, ref = _check_pair(x, ref)
    return float(np.mean([uiqi(xb, rb, window) for xb, rb in zip(x, ref)]))


def d_lambda(fused, ms, window: int = 32) -> float:
    """Spectral distortion: inter-band UIQI drift between fused and ms."""
    fused, ms = _as_bands(fused), _as_bands(ms)
    c = fused.shape[0]
    if ms.shape[0] != c:
        raise ValueError(f"band count mismatch {c} vs {ms.shape[0]}")
    if c < 2:
        raise UndefinedMetricError("needs at least two bands")
    diffs = []
    for i in range(c):
        for j in range(i + 1, c):
            diffs.append(abs(uiqi(fused[i], fused[j], window)
                             - uiqi(ms[i], ms[j], window)))
    return float(np.mean(diffs))


def d_s(fused, pan, ms, pan_degraded, window: int = 32) -> float:
    """Spatial distortion: per-band UIQI drift against pan at both scales."""
    fused, ms = _as_bands(fused), _as_bands(ms)
    pan = _as_bands(pan)[0]
    pan_degraded = _as_bands(pan_degraded)[0]
    diffs = [abs(uiqi(fb, pan, window) - uiqi(mb, pan_degraded, window))
             for fb, mb in zip(fused, ms)]
    return float(np.mean(diffs))


def qnr(d_lambda_value: float, d_s_value: float,
        alpha: float = 1.0, beta: float = 1.0) -> float:
    """No-reference quality: (1 - D_lambda)^alpha (1 - D_s)^beta."""
    return float((1.0 - d_lambda_value) ** alpha * (1.0 - d_s_value) ** beta)


REFERENCE_METRICS = ("sam", "ergas", "psnr", "ssim", "scc", "q_avg")
NON_REFERENCE_METRICS = ("d_lambda", "d_s", "qnr")


def evaluate_reference(fused, gt, cfg: MetricConfig | None = None) -> dict[str, float]:
    """All reference metrics for one fused/ground-truth pair."""
    cfg = cfg or MetricConfig()
    return {
        "sam": sam(fused, gt, degrees=cfg.degrees),
        "ergas": ergas(fused, gt, scale_ratio=cfg.scale_ratio),
        "psnr": psnr(fused, gt),
        "ssim": ssim(fused, gt),
        "scc": scc(fused, gt),
        "q_avg": q_avg(fused, gt, window=cfg.uiqi_window),
    }


def evaluate_non_reference(fused, pan, ms, pan_degraded,
                           cfg: MetricConfig | None = None) -> dict[str, float]:
    """Non-reference distortions for a full-scale fused product."""
    cfg = cfg or MetricConfig()
    dl = d_lambda(fused, ms, window=cfg.uiqi_window)
    ds = d_s(fused, pan, ms, pan_degraded, window=cfg.uiqi_window)
    return {"d_lambda": dl, "d_s": ds,
            "qnr": qnr(dl, ds, cfg.qnr_alpha, cfg.qnr_beta)}
