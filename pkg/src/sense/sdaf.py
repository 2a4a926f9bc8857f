"""Disparity attention refinement at the end of the decoder.

Disparity is divided by the matcher's maximum (192), resampled bicubically
to each branch resolution, and turned into sigmoid gates by a small conv
stack (3x3 -> ReLU -> 3x3 -> sigmoid). The gates multiply the features at
that resolution. A transposed conv with kernel = stride = patch size lifts
features from token to pixel resolution, and a 1x1 conv yields the logits.

Variants:

* ``two-layer`` (default): gate at token resolution, upsample, gate again
  at full resolution with the native-resolution disparity.
* ``one-layer-low`` / ``one-layer-high``: a single gate at token or full
  resolution.
* ``three-layer``: token, intermediate and full resolution gates; the
  upsampling is split into two transposed convs of kernel sqrt(patch).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sense.errors import ConfigError, InputError

log = logging.getLogger(__name__)

MAX_DISPARITY = 192.0
SDAF_VARIANTS = ("two-layer", "one-layer-low", "one-layer-high", "three-layer")


@dataclass
class DisparityMap:
    values: np.ndarray
    max_disparity: float = MAX_DISPARITY
    clamped_negatives: int = field(default=0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise InputError(f"disparity must be a 2-D raster, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise InputError("disparity contains non-finite values")
        neg = int((v < 0).sum())
        if neg:
            log.warning("clamping %d negative disparity values to 0", neg)
            v = np.maximum(v, 0)
        self.values = v
        self.clamped_negatives += neg

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class DisparityStats:
    """Counts normalized values above 1 (raw disparity beyond the maximum)."""

    def __init__(self):
        self.above_max = 0


STATS = DisparityStats()


def normalize_disparity(d, max_disparity: float = MAX_DISPARITY):
    """``d / max_disparity``. Works on numpy arrays, tensors and DisparityMaps.

    Values above the maximum are not clamped; they are counted in
    ``STATS.above_max`` and logged.
    """
    if isinstance(d, DisparityMap):
        max_disparity = d.max_disparity
        d = d.values
    if isinstance(d, torch.Tensor):
        if not torch.isfinite(d).all():
            raise InputError("disparity contains non-finite values")
        over = int((d > max_disparity).sum())
        out = d / max_disparity
    else:
        d = np.asarray(d, dtype=np.float32)
        if not np.isfinite(d).all():
            raise InputError("disparity contains non-finite values")
        over = int((d > max_disparity).sum())
        out = d / np.float32(max_disparity)
    if over:
        STATS.above_max += over
        log.warning("%d disparity values exceed max_disparity=%g", over, max_disparity)
    return out


def resample_disparity(d_norm: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bicubic resample of ``[H, W]`` or ``[B, 1, H, W]`` to ``target``."""
    if target[0] < 1 or target[1] < 1:
        raise InputError(f"target size must be at least 1x1, got {target}")
    squeeze = d_norm.ndim == 2
    x = d_norm[None, None] if squeeze else d_norm
    if tuple(x.shape[-2:]) != tuple(target):
        x = F.interpolate(x, size=tuple(target), mode="bicubic", align_corners=False)
    return x[0, 0] if squeeze else x


class DisparityGate(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 -> sigmoid, 1 channel in, ``out_ch`` gates out."""

    def __init__(self, out_ch: int, hidden: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, out_ch, 3, padding=1)
        self.to(memory_format=torch.channels_last)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        # channels-last is several times faster for these thin convs on CPU
        d = d.contiguous(memory_format=torch.channels_last)
        return torch.sigmoid(self.conv2(torch.relu(self.conv1(d))))


def _split_patch(patch_size: int) -> int:
    r = math.isqrt(patch_size)
    if r * r != patch_size:
        raise ConfigError(f"three-layer SDAF needs a square patch size, got {patch_size}")
    return r


class SDAF(nn.Module):
    def __init__(self, embed_dim: int = 64, patch_size: int = 16, variant: str = "two-layer",
                 up_width: int = 8, gate_hidden: int = 4, max_disparity: float = MAX_DISPARITY):
        super().__init__()
        if variant not in SDAF_VARIANTS:
            raise ConfigError(f"unknown SDAF variant {variant!r}; expected one of {SDAF_VARIANTS}")
        self.variant, self.patch_size, self.max_disparity = variant, patch_size, max_disparity
        if variant == "three-layer":
            k = _split_patch(patch_size)
            self.upsample = nn.Sequential(
                nn.ConvTranspose2d(embed_dim, up_width, k, stride=k),
                nn.ConvTranspose2d(up_width, up_width, k, stride=k),
            )
        else:
            self.upsample = nn.ConvTranspose2d(embed_dim, up_width, patch_size, stride=patch_size)
        self.head = nn.Conv2d(up_width, 1, 1)
        self.gate_low = DisparityGate(embed_dim, gate_hidden) if variant != "one-layer-high" else None
        self.gate_mid = DisparityGate(up_width, gate_hidden) if variant == "three-layer" else None
        self.gate_high = DisparityGate(up_width, gate_hidden) if variant != "one-layer-low" else None

    @property
    def branch_count(self) -> int:
        return sum(g is not None for g in (self.gate_low, self.gate_mid, self.gate_high))

    def gates(self, d_norm: torch.Tensor, grid: int, full: int) -> dict[str, torch.Tensor]:
        """Modulation weights per branch resolution for ``[B, 1, H, W]`` normalized disparity."""
        out = {}
        if self.gate_low is not None:
            out["low"] = self.gate_low(resample_disparity(d_norm, (grid, grid)))
        if self.gate_mid is not None:
            mid = grid * _split_patch(self.patch_size)
            out["mid"] = self.gate_mid(resample_disparity(d_norm, (mid, mid)))
        if self.gate_high is not None:
            out["high"] = self.gate_high(resample_disparity(d_norm, (full, full)))
        return out

    def forward(self, grid: torch.Tensor, disparity: torch.Tensor, gates: dict | None = None) -> torch.Tensor:
        """``grid`` [B, P, g, g], raw ``disparity`` [B, H, W] or [B, 1, H, W] -> logits [B, H, W]."""
        g = grid.shape[-1]
        full = g * self.patch_size
        if disparity.ndim == 3:
            disparity = disparity.unsqueeze(1)
        if tuple(disparity.shape[-2:]) != (full, full):
            raise InputError(f"disparity is {tuple(disparity.shape[-2:])}, expected {(full, full)}")
        # disparity is a constant input: no gradient reaches the provider
        d_norm = normalize_disparity(disparity.detach().to(grid.dtype), self.max_disparity)
        if gates is None:
            gates = self.gates(d_norm, g, full)
        x = grid
        if "low" in gates:
            x = x * gates["low"]
        if self.variant == "three-layer":
            x = self.upsample[0](x)
            x = x * gates["mid"]
            x = self.upsample[1](x)
        else:
            x = self.upsample(x)
        if "high" in gates:
            x = x * gates["high"]
        return self.head(x)[:, 0]


def sdaf_refine(grid, d, params: SDAF) -> torch.Tensor:
    """Spec-level entry: SpatialFeatureGrid/tensor + DisparityMap/array -> logits."""
    g = getattr(grid, "grid", grid)
    squeeze = g.ndim == 3
    if squeeze:
        g = g.unsqueeze(0)
    values = d.values if isinstance(d, DisparityMap) else d
    dt = torch.as_tensor(np.asarray(values) if not isinstance(values, torch.Tensor) else values, dtype=g.dtype)
    if dt.ndim == 2:
        dt = dt.unsqueeze(0).expand(g.shape[0], -1, -1)
    out = params(g, dt)
    return out[0] if squeeze else out
