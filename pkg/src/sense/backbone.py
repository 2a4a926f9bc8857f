"""Frozen dual-branch vision encoder and text encoder.

Three interchangeable variants sit behind :class:`Backbone`:

* ``toy-vit``: a small ViT (10 blocks, width 32) drawn from a fixed seed,
  paired with a byte-level toy text transformer. Needs no downloads.
* ``reference-vit``: CLIP ViT-B/16 loaded from a local checkpoint directory
  (Hugging Face layout) via ``transformers``.
* ``reference-resnet50``: torchvision ResNet-50 whose stage outputs are
  resampled onto the ViT token grid, with a global-average CLS token.

Every variant returns token maps of shape ``[B, 1 + g*g, C]`` where
``g = input_resolution / patch_size``.
"""

from __future__ import annotations

import hashlib
import math
import os
from pathlib import Path
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sense.errors import ConfigError, InputError

VARIANTS = ("toy-vit", "reference-vit", "reference-resnet50")

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CACHE_ENV = "SENSE_CACHE"


def resolve_weights(path: str | None) -> str | None:
    """Relative weight paths are looked up under ``$SENSE_CACHE`` when it is set."""
    if not path:
        return path
    p = Path(path).expanduser()
    cache = os.environ.get(CACHE_ENV)
    if not p.is_absolute() and cache and not p.exists():
        p = Path(cache).expanduser() / p
    if not p.exists():
        raise ConfigError(f"backbone weights not found: {p} (set {CACHE_ENV} or use an absolute path)")
    return str(p)


@dataclass
class BackboneConfig:
    variant: str = "toy-vit"
    patch_size: int = 16
    width: int = 32
    extract_blocks: tuple[int, ...] = (3, 7, 9)
    input_resolution: int = 352
    depth: int = 10
    heads: int = 2
    text_width: int = 32
    seed: int = 0
    weights_path: str | None = None
    text_weights_path: str | None = None
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.extract_blocks = tuple(int(b) for b in self.extract_blocks)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}; expected one of {VARIANTS}")
        if self.patch_size < 1 or self.input_resolution % self.patch_size:
            raise ConfigError(
                f"input_resolution {self.input_resolution} is not divisible by patch_size {self.patch_size}"
            )
        if not self.extract_blocks:
            raise ConfigError("extract_blocks must not be empty")
        if any(b >= a for a, b in zip(self.extract_blocks[1:], self.extract_blocks[:-1])):
            raise ConfigError(f"extract_blocks must be strictly increasing, got {self.extract_blocks}")
        if self.extract_blocks[0] < 0 or self.extract_blocks[-1] >= self.depth:
            raise ConfigError(f"extract_blocks {self.extract_blocks} out of range for depth {self.depth}")

    @property
    def grid(self) -> int:
        return self.input_resolution // self.patch_size

    @classmethod
    def toy(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)

    @classmethod
    def reference_vit(cls, weights_path: str | None = None, **overrides) -> "BackboneConfig":
        kw = dict(variant="reference-vit", width=768, depth=12, heads=12, text_width=512,
                  mean=CLIP_MEAN, std=CLIP_STD, weights_path=weights_path)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def reference_resnet50(cls, weights_path: str | None = None, **overrides) -> "BackboneConfig":
        kw = dict(variant="reference-resnet50", width=1024, depth=4, extract_blocks=(1, 2, 3),
                  text_width=512, mean=IMAGENET_MEAN, std=IMAGENET_STD, weights_path=weights_path)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TokenFeatureMap:
    """Activations of one encoder block, CLS token at row 0."""

    tokens: np.ndarray
    grid_w: int
    grid_h: int
    source_block: int

    def __post_init__(self):
        if self.tokens.shape[0] != 1 + self.grid_w * self.grid_h:
            raise InputError(
                f"token count {self.tokens.shape[0]} != 1 + {self.grid_w}*{self.grid_h}"
            )


@dataclass
class PromptEmbedding:
    vector: np.ndarray
    prompt_text: str = field(default="")


def adapt_positional_embeddings(base_grid: torch.Tensor, target_grid: tuple[int, int]) -> torch.Tensor:
    """Resize a ``[g0, g0, C]`` positional-embedding grid to ``[g, g, C]``.

    Uses bicubic interpolation with corner alignment, so the border rows
    of the table map onto the border rows of the output and a linear field
    is reproduced without overshoot. Returns the input unchanged when the
    sizes already agree.
    """
    if base_grid.ndim != 3 or base_grid.shape[0] != base_grid.shape[1]:
        raise ConfigError(f"positional grid must be square [g0, g0, C], got {tuple(base_grid.shape)}")
    g_h, g_w = target_grid
    if g_h != g_w:
        raise ConfigError(f"target grid must be square, got {target_grid}")
    if g_h < 1:
        raise ConfigError("target grid must be at least 1x1")
    if g_h == base_grid.shape[0]:
        return base_grid
    x = base_grid.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=(g_h, g_w), mode="bicubic", align_corners=True)
    return x[0].permute(1, 2, 0)


def resize_position_table(table: torch.Tensor, grid: int) -> torch.Tensor:
    """``[1 + g0*g0, C]`` table with CLS first -> ``[1 + grid*grid, C]``."""
    g0 = math.isqrt(table.shape[0] - 1)
    if g0 * g0 != table.shape[0] - 1:
        raise ConfigError(f"position table of {table.shape[0]} rows is not CLS + square grid")
    cls, spatial = table[:1], table[1:].reshape(g0, g0, -1)
    spatial = adapt_positional_embeddings(spatial, (grid, grid))
    return torch.cat([cls, spatial.reshape(grid * grid, -1)], dim=0)


def _encoder_layer(width: int, heads: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        width, heads, 4 * width, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
    )


class ToyVisionEncoder(nn.Module):
    """Small ViT with a 224-pixel native position table, resized on demand."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        g0 = 224 // cfg.patch_size
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, cfg.width) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1 + g0 * g0, cfg.width) * 0.02)
        self.norm_pre = nn.LayerNorm(cfg.width)
        self.blocks = nn.ModuleList(_encoder_layer(cfg.width, cfg.heads) for _ in range(cfg.depth))

    def forward(self, images: torch.Tensor, extract: Sequence[int]) -> list[torch.Tensor]:
        x = self.patch_embed(images)
        grid = x.shape[-1]
        x = x.flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = self.norm_pre(x + resize_position_table(self.pos_embed, grid))
        wanted, out = set(extract), []
        for k, blk in enumerate(self.blocks):
            x = blk(x)
            if k in wanted:
                out.append(x)
            if k >= extract[-1]:
                break
        return out


class ToyTextEncoder(nn.Module):
    """Byte-level transformer; mean-pools token states into one vector."""

    max_len = 77

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = cfg.text_width
        self.embed = nn.Embedding(258, w)
        self.pos = nn.Parameter(torch.randn(self.max_len, w) * 0.02)
        self.blocks = nn.ModuleList(_encoder_layer(w, 2) for _ in range(2))
        self.norm = nn.LayerNorm(w)
        self.proj = nn.Linear(w, w, bias=False)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        vecs = []
        for p in prompts:
            ids = [256] + list(p.encode("utf-8"))[: self.max_len - 2] + [257]
            x = self.embed(torch.tensor(ids, device=self.pos.device)) + self.pos[: len(ids)]
            x = x.unsqueeze(0)
            for blk in self.blocks:
                x = blk(x)
            vecs.append(self.proj(self.norm(x).mean(dim=1))[0])
        return torch.stack(vecs)


class ClipVisionEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        from transformers import CLIPVisionModel

        if not cfg.weights_path:
            raise ConfigError("reference-vit requires backbone.weights_path")
        self.model = CLIPVisionModel.from_pretrained(resolve_weights(cfg.weights_path), local_files_only=True)
        vcfg = self.model.config
        if vcfg.patch_size != cfg.patch_size or vcfg.hidden_size != cfg.width:
            raise ConfigError(
                f"checkpoint has patch {vcfg.patch_size}/width {vcfg.hidden_size}, "
                f"config says {cfg.patch_size}/{cfg.width}"
            )
        if len(self.model.encoder.layers) != cfg.depth:
            raise ConfigError(f"checkpoint depth {len(self.model.encoder.layers)} != backbone.depth {cfg.depth}")

    def forward(self, images: torch.Tensor, extract: Sequence[int]) -> list[torch.Tensor]:
        emb = self.model.embeddings
        x = emb.patch_embedding(images.to(emb.patch_embedding.weight.dtype))
        grid = x.shape[-1]
        x = x.flatten(2).transpose(1, 2)
        cls = emb.class_embedding.reshape(1, 1, -1).expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + resize_position_table(emb.position_embedding.weight, grid)
        x = self.model.pre_layrnorm(x)
        wanted, out = set(extract), []
        for k, layer in enumerate(self.model.encoder.layers):
            x = layer(x, attention_mask=None)
            if isinstance(x, tuple):
                x = x[0]
            if k in wanted:
                out.append(x)
            if k >= extract[-1]:
                break
        return out


class ClipTextEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        from transformers import CLIPTextModelWithProjection, CLIPTokenizer

        path = resolve_weights(cfg.text_weights_path or cfg.weights_path)
        if not path:
            raise ConfigError("the CLIP text encoder needs backbone.text_weights_path or backbone.weights_path")
        self.tokenizer = CLIPTokenizer.from_pretrained(path, local_files_only=True)
        self.model = CLIPTextModelWithProjection.from_pretrained(path, local_files_only=True)
        if self.model.config.projection_dim != cfg.text_width:
            raise ConfigError(
                f"text checkpoint projects to {self.model.config.projection_dim}, config says {cfg.text_width}"
            )

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        tok = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        return self.model(**tok).text_embeds


class ResNetVisionEncoder(nn.Module):
    """ResNet-50 stages pooled onto the patch grid; CLS = global average."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        import torchvision

        net = torchvision.models.resnet50(weights=None)
        if cfg.weights_path:
            state = torch.load(resolve_weights(cfg.weights_path), map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.patch_size = cfg.patch_size

    def forward(self, images: torch.Tensor, extract: Sequence[int]) -> list[torch.Tensor]:
        grid = images.shape[-1] // self.patch_size
        x = self.stem(images)
        out = []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            if k in extract:
                fmap = F.adaptive_avg_pool2d(x, grid) if x.shape[-1] >= grid else F.interpolate(
                    x, size=(grid, grid), mode="bicubic", align_corners=False)
                tokens = fmap.flatten(2).transpose(1, 2)
                cls = x.mean(dim=(2, 3)).unsqueeze(1)
                out.append(torch.cat([cls, tokens], dim=1))
            if k >= extract[-1]:
                break
        return out


RESNET_WIDTHS = (256, 512, 1024, 2048)


class Backbone(nn.Module):
    """Frozen vision + text encoders. One vision encoder serves both views."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            if cfg.variant == "toy-vit":
                self.vision = ToyVisionEncoder(cfg)
                self.text = ToyTextEncoder(cfg)
            elif cfg.variant == "reference-vit":
                self.vision = ClipVisionEncoder(cfg)
                self.text = ClipTextEncoder(cfg)
            else:
                self.vision = ResNetVisionEncoder(cfg)
                self.text = ClipTextEncoder(cfg) if cfg.text_weights_path else ToyTextEncoder(cfg)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: always stays in eval mode
        return super().train(False)

    @property
    def block_widths(self) -> list[int]:
        if self.cfg.variant == "reference-resnet50":
            return [RESNET_WIDTHS[b] for b in self.cfg.extract_blocks]
        return [self.cfg.width] * len(self.cfg.extract_blocks)

    @property
    def text_dim(self) -> int:
        return self.cfg.text_width

    def _check_images(self, images: torch.Tensor):
        res = self.cfg.input_resolution
        if images.ndim != 4 or images.shape[1] != 3:
            raise InputError(f"expected images [B, 3, H, W], got {tuple(images.shape)}")
        if images.shape[-2:] != (res, res):
            raise ConfigError(f"image resolution {tuple(images.shape[-2:])} != backbone resolution {res}")
        if not torch.isfinite(images).all():
            raise InputError("image contains non-finite pixels")

    @torch.no_grad()
    def encode_images(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Normalized ``[B, 3, res, res]`` -> one ``[B, 1+g*g, C]`` tensor per extract block."""
        self._check_images(images)
        return self.vision(images, self.cfg.extract_blocks)

    @torch.no_grad()
    def encode_texts(self, prompts: Sequence[str]) -> torch.Tensor:
        for p in prompts:
            if not isinstance(p, str) or not p.strip():
                raise InputError("prompt must be a non-empty string")
        return self.text(list(prompts))

    def encode_image(self, image: np.ndarray) -> list[TokenFeatureMap]:
        """Encode one normalized ``[res, res, 3]`` image."""
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"expected [res, res, 3] image, got {image.shape}")
        x = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
        maps = self.encode_images(x)
        g = self.cfg.grid
        return [
            TokenFeatureMap(m[0].numpy(), grid_w=g, grid_h=g, source_block=b)
            for m, b in zip(maps, self.cfg.extract_blocks)
        ]

    def encode_text(self, prompt: str) -> PromptEmbedding:
        vec = self.encode_texts([prompt])[0].numpy()
        return PromptEmbedding(vec, prompt)

    def parameter_digest(self) -> str:
        """SHA-256 over every parameter and buffer, in state-dict order."""
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def normalize_image(image: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """uint8 or [0,1] float ``[H, W, 3]`` -> mean/std normalized float32."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    else:
        img = img.astype(np.float32)
    if not np.isfinite(img).all():
        raise InputError("image contains non-finite pixels")
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    return (img - mean) / std


_CACHE: dict[tuple, Backbone] = {}


def build_backbone(cfg: BackboneConfig, cache: bool = True) -> Backbone:
    """Construct (or reuse) a frozen backbone for ``cfg``."""
    key = (cfg.variant, cfg.patch_size, cfg.width, cfg.extract_blocks, cfg.input_resolution,
           cfg.depth, cfg.heads, cfg.text_width, cfg.seed, cfg.weights_path, cfg.text_weights_path)
    if cache and key in _CACHE:
        return _CACHE[key]
    bb = Backbone(cfg)
    if cache:
        _CACHE[key] = bb
    return bb
