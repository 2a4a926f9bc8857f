"""Training loop for the fusion modules, decoder and refinement head.

The backbone is frozen and deterministic, so its features are cached per
(sample, crop window). Text embeddings are cached per phrase.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from sense.backbone import BackboneConfig, normalize_image
from sense.dataset import Batch, StereoSample, _as_loaded, make_batch
from sense.errors import ConfigError, FormatError, InputError, MissingFileError, TrainingDivergedError
from sense.model import ModelConfig, SenseModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sense-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    total_steps: int = 300
    negative_fraction: float = 0.2
    resolution: int = 352
    sdaf_variant: str = "two-layer"
    sief_variant: str = "attention"
    sf: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.negative_fraction <= 1:
            raise ConfigError("negative_fraction must be in [0, 1]")

    def model_config(self, backbone: BackboneConfig | None = None, **overrides) -> ModelConfig:
        bb = backbone or BackboneConfig()
        if bb.input_resolution != self.resolution:
            bb = BackboneConfig(**{**asdict(bb), "input_resolution": self.resolution})
        kw = dict(backbone=bb, sdaf_variant=self.sdaf_variant, sief_variant=self.sief_variant,
                  sf=self.sf, init_seed=self.seed)
        kw.update(overrides)
        return ModelConfig(**kw)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``; no warmup."""
    t = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy with logits."""
    target = torch.as_tensor(target, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise InputError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise InputError("targets must be binary {0, 1}")
    return F.binary_cross_entropy_with_logits(logits, target)


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    step: int = 0
    feature_cache: dict = field(default_factory=dict)
    text_cache: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def init_train_state(model: SenseModel, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return TrainState(opt, cfg)


def _pair_tensor(model: SenseModel, image: np.ndarray) -> torch.Tensor:
    arr = normalize_image(image, model.cfg.backbone)
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)


def batch_features(model: SenseModel, batch: Batch, cache: dict | None = None):
    """Per-block ``(F_left, F_right)`` stacked over the batch, reusing cached entries."""
    cache = {} if cache is None else cache
    keys = [(sid, win) for sid, win in zip(batch.source_ids, batch.windows)] if batch.source_ids else [None] * len(batch)
    missing = [i for i, k in enumerate(keys) if k is None or k not in cache]
    if missing:
        left = torch.stack([_pair_tensor(model, batch.pairs[i].left) for i in missing])
        right = torch.stack([_pair_tensor(model, batch.pairs[i].right) for i in missing])
        feats = model.encode_pair(left, right)
        fresh = {}
        for j, i in enumerate(missing):
            entry = [(fl[j], fr[j]) for fl, fr in feats]
            fresh[i] = entry
            if keys[i] is not None:
                cache[keys[i]] = entry
    else:
        fresh = {}
    per_sample = [fresh[i] if i in fresh else cache[keys[i]] for i in range(len(batch))]
    n_blocks = len(per_sample[0])
    return [
        (torch.stack([s[b][0] for s in per_sample]), torch.stack([s[b][1] for s in per_sample]))
        for b in range(n_blocks)
    ]


def batch_text(model: SenseModel, phrases: Sequence[str], cache: dict | None = None) -> torch.Tensor:
    cache = {} if cache is None else cache
    todo = [p for p in dict.fromkeys(phrases) if p not in cache]
    if todo:
        for p, v in zip(todo, model.encode_prompts(todo)):
            cache[p] = v
    return torch.stack([cache[p] for p in phrases])


def batch_disparity(batch: Batch, model: SenseModel) -> torch.Tensor | None:
    if not model.cfg.sdaf_enabled:
        return None
    if any(d is None for d in batch.disparities):
        raise InputError("every sample needs a disparity map while SDAF is enabled")
    return torch.from_numpy(np.stack(batch.disparities).astype(np.float32))


def forward_batch(model: SenseModel, batch: Batch, state: TrainState | None = None) -> torch.Tensor:
    fc = state.feature_cache if state is not None else None
    tc = state.text_cache if state is not None else None
    return model.head(batch_features(model, batch, fc), batch_text(model, batch.phrases, tc),
                      batch_disparity(batch, model))


def train_step(model: SenseModel, batch: Batch, state: TrainState, cfg: TrainConfig | None = None):
    """One optimizer step. Returns ``(model, state, loss_value)``."""
    cfg = cfg or state.cfg
    model.train()
    lr = cosine_lr(state.step, cfg.total_steps, cfg.lr)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    logits = forward_batch(model, batch, state)
    value = loss(logits, torch.from_numpy(batch.targets))
    if not torch.isfinite(value):
        norms = {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}
        raise TrainingDivergedError(f"non-finite loss at step {state.step} (lr={lr:g}); last grad norms: {norms}")
    state.optimizer.zero_grad(set_to_none=True)
    value.backward()
    if cfg.grad_clip and cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return model, state, float(value.detach())


@dataclass
class TrainResult:
    losses: list[float]
    lrs: list[float]
    state: TrainState


def fit(model: SenseModel, samples: Sequence, cfg: TrainConfig, log_path=None,
        fixed_batch: bool = False, feature_cache: dict | None = None) -> TrainResult:
    """Run ``cfg.total_steps`` steps; optional JSONL log of ``{step, loss, lr}``.

    With ``fixed_batch`` the batch drawn at step 0 is reused every step
    (full-batch overfitting). ``feature_cache`` may be shared between runs
    that use the same backbone.
    """
    loaded = _as_loaded(samples)
    state = init_train_state(model, cfg)
    if feature_cache is not None:
        state.feature_cache = feature_cache
    losses, lrs = [], []
    fh = open(log_path, "w") if log_path else None
    batch = None
    try:
        for step in range(cfg.total_steps):
            if batch is None or not fixed_batch:
                batch = make_batch(loaded, cfg.batch_size, cfg.negative_fraction,
                                   rng_seed=cfg.seed * 1_000_003 + step, resolution=cfg.resolution)
            lr = cosine_lr(step, cfg.total_steps, cfg.lr)
            model, state, value = train_step(model, batch, state, cfg)
            losses.append(value)
            lrs.append(lr)
            if fh:
                fh.write(json.dumps({"step": step, "loss": value, "lr": lr}) + "\n")
            if step % 50 == 0:
                log.info("step %d loss %.4f lr %.2e", step, value, lr)
    finally:
        if fh:
            fh.close()
    return TrainResult(losses, lrs, state)


# -- checkpoints -----------------------------------------------------------


class CheckpointMismatchError(ConfigError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    state_dict: dict
    optimizer: dict | None = None
    step: int = 0
    version: int = CHECKPOINT_VERSION


def make_checkpoint(model: SenseModel, cfg: TrainConfig | None = None, state: TrainState | None = None) -> Checkpoint:
    return Checkpoint(
        model_config=model.cfg.to_dict(),
        train_config=asdict(cfg) if cfg else {},
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=state.optimizer.state_dict() if state else None,
        step=state.step if state else 0,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {"format": CHECKPOINT_FORMAT, **asdict(ckpt)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on corrupt archives
        raise FormatError(f"{path}: unreadable checkpoint ({type(exc).__name__}: {exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    payload.pop("format")
    return Checkpoint(**payload)


def restore_model(ckpt: Checkpoint, model_cfg: ModelConfig | None = None) -> SenseModel:
    """Build a model (from ``model_cfg`` or the checkpoint's own config) and load weights.

    Mismatched parameter groups raise :class:`CheckpointMismatchError` naming
    the group (``sief``, ``decoder`` or ``sdaf``).
    """
    cfg = model_cfg or ModelConfig(**ckpt.model_config)
    model = SenseModel(cfg)
    own = model.state_dict()
    problems = {}
    for k in set(own) | set(ckpt.state_dict):
        group = k.split(".")[0]
        if k not in own or k not in ckpt.state_dict:
            problems.setdefault(group, []).append(f"{k} missing on {'model' if k not in own else 'checkpoint'} side")
        elif own[k].shape != ckpt.state_dict[k].shape:
            problems.setdefault(group, []).append(
                f"{k} shape {tuple(ckpt.state_dict[k].shape)} vs {tuple(own[k].shape)}")
    if problems:
        groups = ", ".join(sorted(problems))
        detail = "; ".join(v[0] for v in problems.values())
        raise CheckpointMismatchError(f"checkpoint does not fit parameter group(s) {groups}: {detail}")
    model.load_state_dict(ckpt.state_dict)
    return model
