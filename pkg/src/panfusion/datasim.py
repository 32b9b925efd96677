"""Reduced-scale protocol: sensor-style degradation, polynomial upsampling,
synthetic scene generation, and the residual-compressibility measure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensorio import (DatasetManifest, ImageTensor, ManifestEntry,
                       save_manifest, write_tensor)

MS_NYQUIST_GAIN = 0.3
PAN_NYQUIST_GAIN = 0.15

# Classic 23-tap even-symmetric interpolator; half given here from the center
# outward, zeros at even offsets so existing samples pass through untouched.
_POLY23_HALF = np.array([
    0.5, 0.305334091185, 0.0, -0.072698593239, 0.0, 0.021809577942,
    0.0, -0.005192756653, 0.0, 0.000807762146, 0.0, -0.000060081482,
], dtype=np.float64)
POLY23_TAPS = 2.0 * np.concatenate([_POLY23_HALF[:0:-1], _POLY23_HALF])
# reach of the kernel measured in original (pre-stuffing) samples
_POLY23_PAD = (len(POLY23_TAPS) // 2 + 1) // 2


def mtf_sigma(ratio: int, nyquist_gain: float) -> float:
    """Gaussian std whose frequency response hits nyquist_gain at the target
    grid's Nyquist frequency (1 / (2 ratio) cycles per input sample)."""
    if not 0.0 < nyquist_gain < 1.0:
        raise ValueError(f"nyquist_gain must be in (0, 1), got {nyquist_gain}")
    return ratio * math.sqrt(-2.0 * math.log(nyquist_gain)) / math.pi


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalized odd-length Gaussian kernel truncated at 4 sigma."""
    radius = max(1, int(math.ceil(4.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * np.square(t / sigma))
    return k / k.sum()


def mtf_downsample(x: np.ndarray, ratio: int = 4,
                   nyquist_gain: float = MS_NYQUIST_GAIN) -> np.ndarray:
    """Blur each band with the sensor-matched Gaussian and decimate.

    Boundary handling is symmetric extension.  Spatial dims must divide by
    ``ratio``; decimation keeps samples at indices 0, ratio, 2 ratio, ...
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if h % ratio or w % ratio:
        raise ValueError(f"dims {h}x{w} not divisible by ratio {ratio}")
    taps = gaussian_taps(mtf_sigma(ratio, nyquist_gain))
    y = x.astype(np.float64, copy=False)
    y = ndimage.correlate1d(y, taps, axis=-2, mode="reflect")
    y = ndimage.correlate1d(y, taps, axis=-1, mode="reflect")
    y = y[..., ::ratio, ::ratio]
    return y.astype(np.float32) if x.dtype == np.float32 else y


def _upsample2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (_POLY23_PAD, _POLY23_PAD)
    xp = np.pad(x, pad, mode="symmetric")
    shape = list(xp.shape)
    shape[axis] *= 2
    stuffed = np.zeros(shape, dtype=np.float64)
    sel = [slice(None)] * x.ndim
    sel[axis] = slice(0, None, 2)
    stuffed[tuple(sel)] = xp
    y = ndimage.correlate1d(stuffed, POLY23_TAPS, axis=axis, mode="constant")
    out = [slice(None)] * x.ndim
    out[axis] = slice(2 * _POLY23_PAD, 2 * _POLY23_PAD + 2 * n)
    return y[tuple(out)]


def poly23_upsample(x: np.ndarray, ratio: int = 4) -> np.ndarray:
    """Polynomial interpolation by cascaded x2 stages along both spatial axes.

    Even output positions copy input samples exactly; odd positions come
    from the frozen 23-tap kernel over a symmetric extension.
    """
    if ratio < 2 or ratio & (ratio - 1):
        raise ValueError(f"ratio must be a power of two >= 2, got {ratio}")
    x = np.asarray(x)
    y = x.astype(np.float64, copy=False)
    for _ in range(int(math.log2(ratio))):
        y = _upsample2_axis(y, -2)
        y = _upsample2_axis(y, -1)
    return y.astype(np.float32) if x.dtype == np.float32 else y


@dataclass
class FusionSample:
    """One co-registered record: full-size pan and upsampled lrms, the
    original low-resolution ms, and (at reduced scale) the reference."""

    pan: np.ndarray
    lrms_up: np.ndarray
    ms: np.ndarray
    gt: np.ndarray | None = None
    range_hint: tuple[float, float] = (0.0, 1.0)


def wald_simulate(hrms: np.ndarray, pan: np.ndarray, scale_ratio: int = 4,
                  ms_nyquist_gain: float = MS_NYQUIST_GAIN,
                  pan_nyquist_gain: float = PAN_NYQUIST_GAIN) -> FusionSample:
    """Degrade a co-registered (hrms, pan) scene to reduced scale.

    Both sensors are taken down one ratio step so the degraded multispectral
    image can serve as ground truth; the ms input to fusion comes from a
    second degradation of that reference.
    """
    hrms = np.asarray(hrms)
    pan = np.asarray(pan)
    if hrms.shape[-2:] != pan.shape[-2:]:
        raise ValueError(f"hrms {hrms.shape[-2:]} and pan {pan.shape[-2:]} differ")
    if pan.shape[0] != 1:
        raise ValueError(f"pan must have one band, got {pan.shape[0]}")
    h, w = hrms.shape[-2:]
    if h % scale_ratio ** 2 or w % scale_ratio ** 2:
        raise ValueError(f"dims {h}x{w} not divisible by ratio^2 {scale_ratio ** 2}")
    pan_lo = mtf_downsample(pan, scale_ratio, pan_nyquist_gain)
    gt = mtf_downsample(hrms, scale_ratio, ms_nyquist_gain)
    ms = mtf_downsample(gt, scale_ratio, ms_nyquist_gain)
    lrms_up = poly23_upsample(ms, scale_ratio)
    return FusionSample(pan=pan_lo, lrms_up=lrms_up, ms=ms, gt=gt)


@dataclass
class SynthConfig:
    """Knobs for the seeded synthetic scene generator."""

    out_root: Path | str = "."
    bands: int = 4
    patch_size: int = 64
    train_count: int = 64
    val_count: int = 8
    test_count: int = 8
    seed: int = 0
    scale_ratio: int = 4
    smoothness: float = 12.0
    detail_amplitude: float = 0.26
    base_amplitude: float = 0.16
    pan_detail_gain: float = 0.02
    ms_nyquist_gain: float = MS_NYQUIST_GAIN
    pan_nyquist_gain: float = PAN_NYQUIST_GAIN

    def validate(self) -> None:
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.patch_size % self.scale_ratio or self.patch_size % 4:
            raise ValueError(f"patch_size {self.patch_size} not divisible by 4")
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.train_count + self.val_count + self.test_count == 0:
            raise ValueError("at least one split must be non-empty")
        if self.smoothness <= 0 or self.detail_amplitude < 0:
            raise ValueError("smoothness must be > 0 and detail_amplitude >= 0")


def _unit_field(rng: np.random.Generator, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _detail_field(rng: np.random.Generator, shape) -> np.ndarray:
    # band-limited texture that survives one degradation step but is mostly
    # above the Nyquist limit of the twice-degraded grid
    n = rng.standard_normal(shape)
    f = (ndimage.gaussian_filter(n, 1.2, mode="wrap")
         - ndimage.gaussian_filter(n, 4.0, mode="wrap"))
    sd = f.std()
    return f / sd if sd > 0 else f


def make_scene(cfg: SynthConfig, split: str, index: int
               ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic co-registered (hrms, pan) pair at scale_ratio x patch size."""
    split_id = ("train", "val", "test").index(split)
    rng = np.random.default_rng([cfg.seed, split_id, index])
    size = cfg.patch_size * cfg.scale_ratio
    c = cfg.bands
    shared = _unit_field(rng, (size, size), cfg.smoothness)
    # texture concentrated in part of the scene keeps the residual histogram
    # peaked, so the detail layer stays more compressible than the scene
    gate = np.clip(0.5 + 0.9 * _unit_field(rng, (size, size), cfg.smoothness), 0.0, 1.0)
    detail = _detail_field(rng, (size, size)) * gate
    gains = cfg.detail_amplitude * rng.uniform(0.7, 1.3, size=c)
    hrms = np.empty((c, size, size), dtype=np.float64)
    for b in range(c):
        own = _unit_field(rng, (size, size), cfg.smoothness)
        hrms[b] = (0.5 + cfg.base_amplitude * (0.6 * shared + 0.4 * own)
                   + gains[b] * detail)
    weights = rng.uniform(0.5, 1.5, size=c)
    weights /= weights.sum()
    extra = _detail_field(rng, (size, size)) * gate
    pan = np.tensordot(weights, hrms, axes=1) + cfg.pan_detail_gain * extra
    hrms = np.clip(hrms, 0.0, 1.0).astype(np.float32)
    pan = np.clip(pan, 0.0, 1.0).astype(np.float32)[None]
    return hrms, pan


def synth_dataset(cfg: SynthConfig) -> dict[str, Path]:
    """Generate the dataset tree and return manifest paths keyed by split.

    Layout: <root>/<split>/<idx>_{pan,lrms,ms,gt}.ten plus a manifest.json
    per split.  Byte-identical across runs for the same config and seed.
    """
    cfg.validate()
    root = Path(cfg.out_root)
    manifests = {}
    counts = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}
    for split, count in counts.items():
        if count == 0:
            continue
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(count):
            hrms, pan = make_scene(cfg, split, i)
            sample = wald_simulate(hrms, pan, cfg.scale_ratio,
                                   cfg.ms_nyquist_gain, cfg.pan_nyquist_gain)
            paths = {k: split_dir / f"{i:04d}_{k}.ten"
                     for k in ("pan", "lrms", "ms", "gt")}
            write_tensor(paths["pan"], ImageTensor(sample.pan))
            write_tensor(paths["lrms"], ImageTensor(sample.lrms_up))
            write_tensor(paths["ms"], ImageTensor(sample.ms))
            write_tensor(paths["gt"], ImageTensor(sample.gt))
            entries.append(ManifestEntry(**paths))
        manifest = DatasetManifest(split=split, scale_ratio=cfg.scale_ratio,
                                   entries=entries, root=split_dir)
        manifest_path = split_dir / "manifest.json"
        save_manifest(manifest, manifest_path)
        manifests[split] = manifest_path
    return manifests


def load_sample(entry: ManifestEntry) -> FusionSample:
    from .tensorio import read_tensor

    gt = read_tensor(entry.gt) if entry.gt is not None else None
    return FusionSample(
        pan=read_tensor(entry.pan).data,
        lrms_up=read_tensor(entry.lrms).data,
        ms=read_tensor(entry.ms).data,
        gt=None if gt is None else gt.data,
    )


def entropy_bpp(x: np.ndarray, bins: int = 256) -> float:
    """Shannon entropy in bits per pixel, averaged over bands.

    Each band is histogrammed into equal-width bins spanning its own
    min..max range; a constant band carries zero bits.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    total = 0.0
    for band in x:
        lo, hi = float(band.min()), float(band.max())
        if lo == hi:
            continue
        hist, _ = np.histogram(band, bins=bins, range=(lo, hi))
        p = hist[hist > 0] / band.size
        total += float(-(p * np.log2(p)).sum())
    return total / x.shape[0]
