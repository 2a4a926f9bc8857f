"""End-to-end stereo segmentation model.

Only the fusion modules, decoder and refinement head are registered as
submodules; the backbone is held by reference so it never shows up in
``parameters()`` or ``state_dict()``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.special import expit

from sense.backbone import Backbone, BackboneConfig, build_backbone, normalize_image
from sense.decoder import Decoder
from sense.errors import ConfigError, InputError
from sense.sdaf import SDAF, SDAF_VARIANTS, DisparityMap
from sense.sief import SIEF, SIEF_VARIANTS


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    embed_dim: int = 64
    sief_variant: str = "attention"
    sf: int = 16
    sdaf_variant: str = "two-layer"
    decoder_heads: int = 4
    mlp_ratio: int = 4
    up_width: int = 8
    gate_hidden: int = 4
    init_seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.sief_variant not in SIEF_VARIANTS:
            raise ConfigError(f"unknown sief variant {self.sief_variant!r}")
        if self.sdaf_variant not in SDAF_VARIANTS + ("off",):
            raise ConfigError(f"unknown sdaf variant {self.sdaf_variant!r}")
        if self.embed_dim % self.decoder_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.decoder_heads} heads")

    @property
    def sdaf_enabled(self) -> bool:
        return self.sdaf_variant != "off"

    @property
    def resolution(self) -> int:
        return self.backbone.input_resolution

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["extract_blocks"] = list(d["backbone"]["extract_blocks"])
        return d


class SenseModel(nn.Module):
    def __init__(self, cfg: ModelConfig, backbone: Backbone | None = None):
        super().__init__()
        self.cfg = cfg
        bb = backbone if backbone is not None else build_backbone(cfg.backbone)
        object.__setattr__(self, "backbone", bb)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.sief = nn.ModuleDict({
                str(b): SIEF(w, cfg.embed_dim, cfg.sf, cfg.sief_variant)
                for b, w in zip(cfg.backbone.extract_blocks, bb.block_widths)
            })
            self.decoder = Decoder(cfg.embed_dim, bb.text_dim, 3, cfg.decoder_heads, cfg.mlp_ratio,
                                   cfg.backbone.patch_size, cfg.up_width, with_mask_head=not cfg.sdaf_enabled)
            self.sdaf = (SDAF(cfg.embed_dim, cfg.backbone.patch_size, cfg.sdaf_variant, cfg.up_width, cfg.gate_hidden)
                         if cfg.sdaf_enabled else None)
        if len(self.sief) != 3:
            raise ConfigError(f"the decoder needs exactly 3 extraction blocks, got {len(self.sief)}")

    # -- feature plumbing -------------------------------------------------

    def encode_pair(self, left: torch.Tensor, right: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Shared-weight encoding of both views: per block ``(F_left, F_right)``."""
        both = self.backbone.encode_images(torch.cat([left, right], dim=0))
        b = left.shape[0]
        return [(f[:b], f[b:]) for f in both]

    def encode_prompts(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.backbone.encode_texts(prompts)

    def fuse(self, features: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> list[torch.Tensor]:
        dtype = next(self.parameters()).dtype
        return [m(fl.to(dtype), fr.to(dtype)) for m, (fl, fr) in zip(self.sief.values(), features)]

    def head(self, features, text: torch.Tensor, disparity: torch.Tensor | None) -> torch.Tensor:
        """Trainable part: fused features + text (+ disparity) -> logits ``[B, H, W]``."""
        dtype = next(self.parameters()).dtype
        grid = self.decoder(self.fuse(features), text.to(dtype))
        if self.sdaf is None:
            return self.decoder.mask_head(grid)
        if disparity is None:
            raise InputError("disparity is required while SDAF is enabled")
        return self.sdaf(grid, disparity)

    def forward(self, left: torch.Tensor, right: torch.Tensor, text: torch.Tensor,
                disparity: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.encode_pair(left, right), text, disparity)

    # -- single-sample convenience ---------------------------------------

    def _image_tensor(self, image: np.ndarray) -> torch.Tensor:
        res = self.cfg.resolution
        image = np.asarray(image)
        if image.shape[:2] != (res, res):
            raise ConfigError(f"image is {image.shape[:2]}, model resolution is {res}x{res}")
        if image.dtype == np.uint8:
            image = normalize_image(image, self.cfg.backbone)
        return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]

    @torch.no_grad()
    def predict_logits(self, left: np.ndarray, right: np.ndarray, prompts: Sequence[str] | str,
                       disparity=None) -> np.ndarray:
        """Logits ``[N_prompts, res, res]`` for one stereo pair.

        Images are uint8 (normalized here) or float arrays that are already
        normalized with the backbone's mean/std.
        """
        if isinstance(prompts, str):
            prompts = [prompts]
        was_training = self.training
        self.eval()
        try:
            feats = self.encode_pair(self._image_tensor(left), self._image_tensor(right))
            n = len(prompts)
            feats = [(fl.expand(n, -1, -1), fr.expand(n, -1, -1)) for fl, fr in feats]
            d = None
            if disparity is not None:
                values = disparity.values if isinstance(disparity, DisparityMap) else np.asarray(disparity)
                d = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None].expand(n, -1, -1)
            logits = self.head(feats, self.encode_prompts(prompts), d)
        finally:
            self.train(was_training)
        return logits.double().numpy()


def predict_binary(left: np.ndarray, right: np.ndarray, prompt: str, disparity, model: SenseModel) -> np.ndarray:
    """Sigmoid probability map at model resolution for one prompt."""
    if model.cfg.sdaf_enabled and disparity is None:
        raise InputError("disparity is required while SDAF is enabled")
    return expit(model.predict_logits(left, right, [prompt], disparity)[0])


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
