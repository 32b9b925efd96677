"""Condition construction and the two feature-conditioning mechanisms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .wavelet import dwt_haar


@dataclass
class ConditionBundle:
    """Torch-side conditioning tensors, all batched.

    ``full`` is [pan, lrms_up] stacked along channels at full resolution;
    ``bands`` stacks the lrms_up approximation with the three pan detail
    subbands at half resolution.
    """

    pan: torch.Tensor
    lrms_up: torch.Tensor
    bands: torch.Tensor

    @property
    def full(self) -> torch.Tensor:
        return torch.cat([self.pan, self.lrms_up], dim=1)


def condition_bands(pan: np.ndarray, lrms_up: np.ndarray) -> np.ndarray:
    """Half-resolution stack [LL(lrms_up), LH(pan), HL(pan), HH(pan)].

    Accepts (C, H, W) or batched (B, C, H, W) arrays; output has
    lrms_up bands + 3 channels.
    """
    mb = dwt_haar(np.asarray(lrms_up))
    pb = dwt_haar(np.asarray(pan))
    return np.concatenate([mb.ll, pb.lh, pb.hl, pb.hh], axis=-3)


def make_condition(pan: np.ndarray, lrms_up: np.ndarray,
                   device=None) -> ConditionBundle:
    """Build a ConditionBundle from numpy inputs, adding a batch dim if needed."""
    pan = np.asarray(pan, dtype=np.float32)
    lrms_up = np.asarray(lrms_up, dtype=np.float32)
    if pan.ndim == 3:
        pan, lrms_up = pan[None], lrms_up[None]
    bands = condition_bands(pan, lrms_up).astype(np.float32)
    to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(device or "cpu")
    return ConditionBundle(pan=to(pan), lrms_up=to(lrms_up), bands=to(bands))


class StyleModulation(nn.Module):
    """Per-channel affine conditioning: f * (1 + scale) + shift.

    Scale and shift come from a two-conv head over the pooled full-resolution
    condition; zero head output leaves the features untouched.
    """

    def __init__(self, cond_channels: int, feature_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cond_channels, feature_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(feature_channels, 2 * feature_channels, 3, padding=1),
        )

    def forward(self, features: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(cond, features.shape[-2:])
        scale, shift = self.net(pooled).chunk(2, dim=1)
        return features * (1.0 + scale) + shift


def linear_cross_attention(q: torch.Tensor, k: torch.Tensor,
                           v: torch.Tensor) -> torch.Tensor:
    """Factorized attention with channel-softmaxed queries and
    spatial-softmaxed keys.

    Inputs are (batch, channels, n); keys/values may use a different n than
    queries.  The context matrix is channels x channels, so memory stays
    quadratic in channels rather than in positions.
    """
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ValueError(
            f"incompatible shapes q {tuple(q.shape)} k {tuple(k.shape)} v {tuple(v.shape)}"
        )
    q_hat = torch.softmax(q, dim=1)
    k_hat = torch.softmax(k, dim=2)
    context = torch.bmm(k_hat, v.transpose(1, 2))
    return torch.bmm(context.transpose(1, 2), q_hat)


class WaveletModulation(nn.Module):
    """Inject pan detail subbands into a decoder stage by cross-attention.

    Queries are projected from the encoder skip; keys and values are split
    from one joint projection of the subband stack.  The attended output is
    concatenated with the decoder input and the skip (addition of the
    attended output onto the skip is available as ``merge="add"``).
    """

    def __init__(self, band_channels: int, feature_channels: int,
                 merge: str = "concat"):
        super().__init__()
        if merge not in ("concat", "add"):
            raise ValueError(f"unknown merge {merge!r}")
        self.merge = merge
        self.to_q = nn.Conv2d(feature_channels, feature_channels, 1)
        self.to_kv = nn.Conv2d(band_channels, 2 * feature_channels, 1)

    def out_channels(self, dec_channels: int, skip_channels: int) -> int:
        if self.merge == "add":
            return dec_channels + skip_channels
        return dec_channels + 2 * skip_channels

    def forward(self, dec_in: torch.Tensor, skip: torch.Tensor,
                bands: torch.Tensor) -> torch.Tensor:
        b, d, h, w = skip.shape
        if bands.shape[-2] > h or bands.shape[-1] > w:
            bands = F.adaptive_avg_pool2d(bands, (h, w))
        q = self.to_q(skip).flatten(2)
        k, v = self.to_kv(bands).flatten(2).chunk(2, dim=1)
        attended = linear_cross_attention(q, k, v).reshape(b, d, h, w)
        if self.merge == "add":
            return torch.cat([dec_in, skip + attended], dim=1)
        return torch.cat([dec_in, skip, attended], dim=1)
