"""Text-conditioned transformer decoder over fused stereo tokens.

The deepest skip goes through FiLM and then D1. The next two skips are
added to the running tokens before D2 and D3. After D3 the CLS token is
dropped and the remaining tokens are reshaped row-major onto the patch grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from sense.errors import ConfigError, InputError


@dataclass
class SpatialFeatureGrid:
    grid: torch.Tensor  # [B, P, h', w']
    origin_resolution: int


def tokens_to_grid(tokens: torch.Tensor) -> torch.Tensor:
    """CLS-stripped ``[B, h'*w', P]`` -> ``[B, P, h', w']`` (row-major)."""
    b, n, p = tokens.shape
    g = math.isqrt(n)
    if g * g != n:
        raise InputError(f"{n} tokens do not form a square grid")
    return tokens.transpose(1, 2).reshape(b, p, g, g)


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    b, p, h, w = grid.shape
    return grid.reshape(b, p, h * w).transpose(1, 2)


class FiLM(nn.Module):
    """``out = gamma(text) * x + beta(text)``, broadcast over tokens."""

    def __init__(self, text_dim: int, embed_dim: int):
        super().__init__()
        self.gamma = nn.Linear(text_dim, embed_dim)
        self.beta = nn.Linear(text_dim, embed_dim)

    def forward(self, tokens: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        if text.ndim == 1:
            text = text.unsqueeze(0)
        g = self.gamma(text).unsqueeze(-2)
        b = self.beta(text).unsqueeze(-2)
        if tokens.ndim == 2:
            g, b = g[0], b[0]
        return g * tokens + b


def film_condition(tokens: torch.Tensor, text: torch.Tensor, params: FiLM) -> torch.Tensor:
    if tokens.shape[-1] != params.gamma.out_features:
        raise InputError(f"token width {tokens.shape[-1]} != FiLM width {params.gamma.out_features}")
    return params(tokens, torch.as_tensor(text, dtype=params.gamma.weight.dtype))


class MaskHead(nn.Module):
    """Plain upsampling head used when disparity refinement is disabled.

    A transposed conv with kernel = stride = patch size lifts the token grid
    to pixel resolution, then a 1x1 conv emits one logit channel.
    """

    def __init__(self, embed_dim: int, patch_size: int = 16, up_width: int = 8):
        super().__init__()
        self.upsample = nn.ConvTranspose2d(embed_dim, up_width, patch_size, stride=patch_size)
        self.head = nn.Conv2d(up_width, 1, 1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.head(self.upsample(grid))[:, 0]


class Decoder(nn.Module):
    def __init__(self, embed_dim: int = 64, text_dim: int = 32, n_blocks: int = 3, heads: int = 4,
                 mlp_ratio: int = 4, patch_size: int = 16, up_width: int = 8, with_mask_head: bool = False):
        super().__init__()
        if n_blocks != 3:
            raise ConfigError(f"decoder has exactly 3 blocks, got {n_blocks}")
        self.embed_dim = embed_dim
        self.film = FiLM(text_dim, embed_dim)
        for i in range(1, n_blocks + 1):
            self.add_module(f"block{i}", nn.TransformerEncoderLayer(
                embed_dim, heads, mlp_ratio * embed_dim, dropout=0.0,
                activation="gelu", batch_first=True, norm_first=True))
        self.mask_head = MaskHead(embed_dim, patch_size, up_width) if with_mask_head else None

    @property
    def blocks(self) -> list[nn.Module]:
        return [self.block1, self.block2, self.block3]

    def forward(self, skips: Sequence[torch.Tensor], text: torch.Tensor) -> torch.Tensor:
        """``skips`` ordered shallow -> deep, each ``[B, 1+N, P]``; returns ``[B, P, g, g]``."""
        if len(skips) != len(self.blocks):
            raise ConfigError(f"decoder expects {len(self.blocks)} skips, got {len(skips)}")
        shapes = {tuple(s.shape) for s in skips}
        if len(shapes) != 1:
            raise InputError(f"skip token shapes disagree: {sorted(shapes)}")
        deep_first = list(skips)[::-1]
        x = self.film(deep_first[0], text)
        for i, blk in enumerate(self.blocks):
            if i > 0:
                x = x + deep_first[i]
            x = blk(x)
        return tokens_to_grid(x[:, 1:])

    def decode(self, skips, text, origin_resolution: int) -> SpatialFeatureGrid:
        tensors = [getattr(s, "tokens", s) for s in skips]
        return SpatialFeatureGrid(self(tensors, text), origin_resolution)


def mask_head_upsample(grid: SpatialFeatureGrid | torch.Tensor, decoder: Decoder,
                       sdaf_enabled: bool = False) -> torch.Tensor:
    if sdaf_enabled or decoder.mask_head is None:
        raise ConfigError("mask_head_upsample is only available when SDAF is disabled")
    g = grid.grid if isinstance(grid, SpatialFeatureGrid) else grid
    return decoder.mask_head(g)
