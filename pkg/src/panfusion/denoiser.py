"""Conditioned UNet denoiser and its directory checkpoint format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import ConditionBundle, StyleModulation, WaveletModulation
from .diffusion import PREDICTION_KINDS, Prediction
from .tensorio import ImageTensor, read_tensor, write_tensor


@dataclass
class DenoiserConfig:
    in_bands: int
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    prediction_kind: str = "x0"
    use_style_mod: bool = True
    use_wavelet_mod: bool = True
    wavelet_merge: str = "concat"

    @property
    def cond_channels(self) -> int:
        return self.in_bands + 1

    @property
    def band_channels(self) -> int:
        return self.in_bands + 3

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def validate(self) -> None:
        if self.in_bands < 1:
            raise ValueError(f"in_bands must be >= 1, got {self.in_bands}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.levels < 1:
            raise ValueError("channel_multipliers must name at least one level")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError(f"bad channel_multipliers {self.channel_multipliers}")
        if self.prediction_kind not in PREDICTION_KINDS:
            raise ValueError(f"unknown prediction_kind {self.prediction_kind!r}")
        if self.wavelet_merge not in ("concat", "add"):
            raise ValueError(f"unknown wavelet_merge {self.wavelet_merge!r}")
        if not (self.use_style_mod or self.use_wavelet_mod):
            raise ValueError("at least one conditioning path must stay enabled")


def _groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return g


class TimeEmbedding(nn.Module):
    """Sinusoidal step encoding followed by a two-layer projection."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Sequential(
            nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
        ).to(t.device)
        angles = t[:, None].to(torch.float64) * freqs[None, :]
        table = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
        return self.proj(table.to(self.proj[0].weight.dtype))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time(t_emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Standard softmax attention over all spatial positions of one map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).flatten(2).chunk(3, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=2)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class EncoderLevel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.res1 = ResBlock(in_ch, out_ch, time_dim)
        self.res2 = ResBlock(out_ch, out_ch, time_dim)
        if cfg.use_style_mod:
            self.mod1 = StyleModulation(cfg.cond_channels, out_ch)
            self.mod2 = StyleModulation(cfg.cond_channels, out_ch)
        else:
            self.mod1 = self.mod2 = None

    def forward(self, x, t_emb, cond_full):
        x = self.res1(x, t_emb)
        if self.mod1 is not None:
            x = self.mod1(x, cond_full)
        x = self.res2(x, t_emb)
        if self.mod2 is not None:
            x = self.mod2(x, cond_full)
        return x


class DecoderLevel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, dec_ch: int, skip_ch: int, time_dim: int):
        super().__init__()
        if cfg.use_wavelet_mod:
            self.mod = WaveletModulation(cfg.band_channels, skip_ch, cfg.wavelet_merge)
            merged = self.mod.out_channels(dec_ch, skip_ch)
        else:
            self.mod = None
            merged = dec_ch + skip_ch
        self.res1 = ResBlock(merged, skip_ch, time_dim)
        self.res2 = ResBlock(skip_ch, skip_ch, time_dim)

    def forward(self, x, skip, t_emb, bands):
        if self.mod is not None:
            x = self.mod(x, skip, bands)
        else:
            x = torch.cat([x, skip], dim=1)
        x = self.res1(x, t_emb)
        return self.res2(x, t_emb)


class Denoiser(nn.Module):
    """Three-scale conditioned UNet predicting epsilon, x0, or v.

    Spatial dims of the input must divide by 2^(levels - 1).
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_channels * m for m in config.channel_multipliers]
        time_dim = 4 * config.base_channels
        self.time = TimeEmbedding(config.base_channels, time_dim)
        self.stem = nn.Conv2d(config.in_bands, widths[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.enc.append(EncoderLevel(config, prev, w, time_dim))
            if i < len(widths) - 1:
                self.down.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.mid = nn.ModuleList([SelfAttention(widths[-1]), SelfAttention(widths[-1])])
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(len(widths))):
            dec_ch = widths[i + 1] if i + 1 < len(widths) else widths[-1]
            self.dec.append(DecoderLevel(config, dec_ch, widths[i], time_dim))
            if i > 0:
                self.up.append(nn.Conv2d(widths[i], widths[i], 3, padding=1))
        self.head_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.head = nn.Conv2d(widths[0], config.in_bands, 1)
        self.act = nn.SiLU()
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # identity conditioning and zero output at the start of training
        for m in self.modules():
            if isinstance(m, StyleModulation):
                nn.init.zeros_(m.net[-1].weight)
                nn.init.zeros_(m.net[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x_t: torch.Tensor, t, cond: ConditionBundle) -> Prediction:
        if x_t.ndim != 4:
            raise ValueError(f"expected (batch, bands, h, w), got {tuple(x_t.shape)}")
        h, w = x_t.shape[-2:]
        stride = 2 ** (self.config.levels - 1)
        if h % stride or w % stride:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {stride}")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.float32,
                           device=x_t.device)
        t_emb = self.time(t)
        cond_full = cond.full
        feats = self.stem(x_t)
        skips = []
        for i, level in enumerate(self.enc):
            feats = level(feats, t_emb, cond_full)
            skips.append(feats)
            if i < len(self.down):
                feats = self.down[i](feats)
        for block in self.mid:
            feats = block(feats)
        for j, level in enumerate(self.dec):
            feats = level(feats, skips[-1 - j], t_emb, cond.bands)
            if j < len(self.up):
                feats = torch.nn.functional.interpolate(feats, scale_factor=2,
                                                        mode="nearest")
                feats = self.up[j](feats)
        out = self.head(self.act(self.head_norm(feats)))
        return Prediction(kind=self.config.prediction_kind, value=out)


def count_params(config: DenoiserConfig) -> int:
    """Total learnable scalar count for a config."""
    model = Denoiser(config)
    return sum(p.numel() for p in model.parameters())


def config_to_dict(config: DenoiserConfig) -> dict:
    d = asdict(config)
    d["channel_multipliers"] = list(config.channel_multipliers)
    return d


def config_from_dict(d: dict) -> DenoiserConfig:
    d = dict(d)
    d["channel_multipliers"] = tuple(d["channel_multipliers"])
    return DenoiserConfig(**d)


def _blob_name(key: str) -> str:
    return key.replace("/", "_") + ".ten"


def _write_blobs(state: dict[str, np.ndarray], directory: Path) -> dict[str, dict]:
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for key, value in state.items():
        arr = np.asarray(value, dtype=np.float32)
        blob = _blob_name(key)
        write_tensor(directory / blob,
                     ImageTensor(arr.reshape(1, 1, -1), range_hint=(-1e30, 1e30)))
        index[key] = {"dtype": "float32", "shape": list(arr.shape),
                      "blob": f"{directory.name}/{blob}"}
    return index


def _read_blobs(index: dict[str, dict], root: Path) -> dict[str, np.ndarray]:
    out = {}
    for key, rec in index.items():
        data = read_tensor(root / rec["blob"], range_hint=(-1e30, 1e30)).data
        out[key] = data.reshape(rec["shape"])
    return out


@dataclass
class Checkpoint:
    step: int
    config: dict
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    optimizer: dict | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(directory: str | Path, step: int, config: dict,
                    params: dict[str, np.ndarray],
                    ema: dict[str, np.ndarray] | None = None,
                    optimizer: dict | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write a checkpoint directory: manifest.json plus one blob per array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "step": int(step),
        "config": config,
        "params": _write_blobs(params, directory / "params"),
    }
    if ema is not None:
        manifest["ema"] = _write_blobs(ema, directory / "ema")
    if optimizer is not None:
        moments = {}
        state_meta = {}
        for key, rec in optimizer.get("state", {}).items():
            state_meta[key] = {"step": rec["step"]}
            moments[f"{key}.exp_avg"] = rec["exp_avg"]
            moments[f"{key}.exp_avg_sq"] = rec["exp_avg_sq"]
        manifest["optimizer"] = {
            "kind": optimizer.get("kind", "adamw"),
            "state": state_meta,
            "moments": _write_blobs(moments, directory / "optim"),
        }
    if rng_state is not None:
        manifest["rng"] = rng_state
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = _read_blobs(manifest["params"], directory)
    ema = _read_blobs(manifest["ema"], directory) if "ema" in manifest else None
    optimizer = None
    if "optimizer" in manifest:
        rec = manifest["optimizer"]
        moments = _read_blobs(rec["moments"], directory)
        optimizer = {"kind": rec["kind"], "state": {}}
        for key, meta in rec["state"].items():
            optimizer["state"][key] = {
                "step": meta["step"],
                "exp_avg": moments[f"{key}.exp_avg"],
                "exp_avg_sq": moments[f"{key}.exp_avg_sq"],
            }
    return Checkpoint(step=manifest["step"], config=manifest["config"],
                      params=params, ema=ema, optimizer=optimizer,
                      rng_state=manifest.get("rng"),
                      extra=manifest.get("extra", {}))


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, state: dict[str, np.ndarray]) -> None:
    tensors = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in state.items()}
    module.load_state_dict(tensors)
