"""Stereo intermediate-level embedding fusion.

Left and right activations of one encoder block are concatenated along the
channel axis, squeezed through a 1x1 bottleneck (2C -> 2C/sf -> 2C), and
turned into complementary per-token, per-channel weights::

    W_LR = sigmoid(expand(relu(reduce([F_left, F_right]))))
    [W_L, W_R] = softmax over the stacked halves of W_LR
    F_LR = W_L * F_left + W_R * F_right

``F_LR`` is then projected from the backbone width C to the embedding
width P. Tokens play the role of spatial positions, so every 1x1
convolution is a per-token linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from sense.backbone import TokenFeatureMap
from sense.errors import ConfigError, InputError

SIEF_VARIANTS = ("attention", "concat-only", "off")


@dataclass
class FusionWeights:
    w_left: torch.Tensor
    w_right: torch.Tensor


@dataclass
class FusedEmbedding:
    tokens: torch.Tensor
    source_block: int


def _as_tensor(f) -> torch.Tensor:
    if isinstance(f, TokenFeatureMap):
        return torch.as_tensor(f.tokens)
    return f


def _check_pair(f_left, f_right):
    if isinstance(f_left, TokenFeatureMap) and isinstance(f_right, TokenFeatureMap):
        if f_left.source_block != f_right.source_block:
            raise InputError(
                f"left map comes from block {f_left.source_block}, right from {f_right.source_block}"
            )
    a, b = _as_tensor(f_left), _as_tensor(f_right)
    if a.shape != b.shape:
        raise InputError(f"left/right feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def split_softmax(w_lr: torch.Tensor) -> FusionWeights:
    """Split ``[..., 2C]`` gate activations into complementary halves.

    The softmax runs over the two-element (left, right) axis, independently
    for each token and channel.
    """
    c = w_lr.shape[-1] // 2
    stacked = torch.stack([w_lr[..., :c], w_lr[..., c:]], dim=0)
    w = torch.softmax(stacked, dim=0)
    return FusionWeights(w[0], w[1])


class SIEF(nn.Module):
    """Fusion for one extraction block.

    Args:
        width: backbone channel width C.
        embed_dim: output width P.
        sf: bottleneck reduction factor; must divide ``2 * width``.
        variant: ``attention`` (default), ``concat-only`` (one learned 1x1
            conv 2C -> C, no gating), or ``off`` (left view only, as in a
            monocular decoder).
    """

    def __init__(self, width: int, embed_dim: int = 64, sf: int = 16, variant: str = "attention"):
        super().__init__()
        if variant not in SIEF_VARIANTS:
            raise ConfigError(f"unknown SIEF variant {variant!r}; expected one of {SIEF_VARIANTS}")
        self.width, self.embed_dim, self.sf, self.variant = width, embed_dim, sf, variant
        if variant == "attention":
            if sf < 1 or (2 * width) % sf:
                raise ConfigError(f"sf={sf} does not divide 2C={2 * width}")
            self.reduce = nn.Linear(2 * width, 2 * width // sf)
            self.expand = nn.Linear(2 * width // sf, 2 * width)
        elif variant == "concat-only":
            self.mix = nn.Linear(2 * width, width)
        self.proj = nn.Linear(width, embed_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                if m is self.proj:
                    nn.init.xavier_uniform_(m.weight)
                else:
                    nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def fusion_weights(self, f_left: torch.Tensor, f_right: torch.Tensor) -> FusionWeights:
        if self.variant != "attention":
            raise ConfigError(f"fusion weights exist only for the attention variant, not {self.variant!r}")
        f_concat = torch.cat([f_left, f_right], dim=-1)
        w_lr = torch.sigmoid(self.expand(torch.relu(self.reduce(f_concat))))
        return split_softmax(w_lr)

    def fuse_raw(self, f_left: torch.Tensor, f_right: torch.Tensor) -> torch.Tensor:
        """Fused features at backbone width C, before projection."""
        if self.variant == "attention":
            w = self.fusion_weights(f_left, f_right)
            return w.w_left * f_left + w.w_right * f_right
        if self.variant == "concat-only":
            return self.mix(torch.cat([f_left, f_right], dim=-1))
        return f_left

    def forward(self, f_left: torch.Tensor, f_right: torch.Tensor) -> torch.Tensor:
        return self.proj(self.fuse_raw(f_left, f_right))


def compute_fusion_weights(f_left, f_right, params: SIEF) -> FusionWeights:
    a, b = _check_pair(f_left, f_right)
    w = params.fusion_weights(a, b)
    return w


def fuse(f_left, f_right, weights: FusionWeights, params: SIEF, source_block: int | None = None) -> FusedEmbedding:
    """Hadamard-combine two views with given weights, then project to P."""
    a, b = _check_pair(f_left, f_right)
    if weights.w_left.shape != a.shape or weights.w_right.shape != a.shape:
        raise InputError("fusion weight shape does not match the feature maps")
    f_lr = weights.w_left * a + weights.w_right * b
    block = source_block if source_block is not None else getattr(f_left, "source_block", -1)
    return FusedEmbedding(params.proj(f_lr), block)


def fuse_concat_only(f_left, f_right, params: SIEF, source_block: int | None = None) -> FusedEmbedding:
    if params.variant != "concat-only":
        raise ConfigError(f"fuse_concat_only called on a {params.variant!r} SIEF")
    a, b = _check_pair(f_left, f_right)
    block = source_block if source_block is not None else getattr(f_left, "source_block", -1)
    return FusedEmbedding(params(a, b), block)
