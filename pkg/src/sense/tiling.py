"""Sliding-window multi-label inference on full-resolution stereo pairs.

Windows of the model resolution step by half a window, with the last
row/column clamped to end on the image border. Per-window sigmoid maps are
weighted by a floored Hann window, accumulated, and divided by the
accumulated weight. The per-prompt maps are then stacked, softmaxed over
the prompt axis, optionally CRF-refined, and reduced by argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, softmax

from sense.crf import CRFConfig, crf_refine
from sense.errors import CoverageError, InputError
from sense.sdaf import DisparityMap

BLEND_EPS = 1e-3


@dataclass(frozen=True)
class TilePlan:
    patch: tuple[int, int]
    strides: tuple[int, int]
    windows: tuple[tuple[int, int], ...]
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.windows)

    def boxes(self) -> list[tuple[int, int, int, int]]:
        """Windows as ``(y, x, h, w)``."""
        h, w = self.patch
        return [(y, x, h, w) for y, x in self.windows]


def _axis_origins(size: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def plan_tiles(H: int, W: int, patch: int | tuple[int, int]) -> TilePlan:
    """Half-overlapping windows covering ``H x W``.

    Origins are the multiples of the stride that keep the window inside
    the image, plus a final clamped origin ``size - patch`` when the last
    multiple does not already end on the border.
    """
    ph, pw = (patch, patch) if isinstance(patch, int) else patch
    if ph < 2 or pw < 2:
        raise InputError(f"patch must be at least 2x2, got {ph}x{pw}")
    if H < ph or W < pw:
        raise InputError(f"image {H}x{W} is smaller than the {ph}x{pw} patch")
    sh, sw = ph // 2, pw // 2
    ys, xs = _axis_origins(H, ph, sh), _axis_origins(W, pw, sw)
    return TilePlan((ph, pw), (sh, sw), tuple((y, x) for y in ys for x in xs), (H, W))


def hann(n: int) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))
    # cos rounding differs between mirrored taps; average them so flips are exact
    return 0.5 * (w + w[::-1])


def cosine_blend_mask(h: int, w: int, eps: float = BLEND_EPS) -> np.ndarray:
    """``max(eps, hann(h) outer hann(w))``: peaks at the center, floored at ``eps``."""
    if h < 2 or w < 2:
        raise InputError(f"blend mask needs h, w >= 2, got {h}x{w}")
    return np.maximum(eps, np.outer(hann(h), hann(w)))


@dataclass
class Accumulators:
    """Weighted prediction sums ``A_P`` (one per channel) and the shared weight sum ``A_W``."""

    A_P: np.ndarray  # [N, H, W]
    A_W: np.ndarray  # [H, W]

    @classmethod
    def zeros(cls, shape: tuple[int, int], channels: int = 1) -> "Accumulators":
        return cls(np.zeros((channels, *shape)), np.zeros(shape))

    def merge(self, other: "Accumulators") -> "Accumulators":
        """Sum of two partial accumulators (for per-worker accumulation)."""
        return Accumulators(self.A_P + other.A_P, self.A_W + other.A_W)


def accumulate(acc: Accumulators, pred: np.ndarray, window: tuple[int, int], mask: np.ndarray) -> Accumulators:
    """Add ``pred * mask`` and ``mask`` into the window at origin ``(y, x)``, in place.

    ``pred`` is ``[h, w]`` for a single channel or ``[N, h, w]``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
    h, w = mask.shape
    y, x = window
    H, W = acc.A_W.shape
    if pred.shape[1:] != (h, w) or pred.shape[0] != acc.A_P.shape[0]:
        raise InputError(f"prediction {pred.shape} does not match mask {mask.shape} x {acc.A_P.shape[0]} channels")
    if y < 0 or x < 0 or y + h > H or x + w > W:
        raise InputError(f"window at {(y, x)} of size {h}x{w} leaves the {H}x{W} image")
    acc.A_P[:, y:y + h, x:x + w] += pred * mask
    acc.A_W[y:y + h, x:x + w] += mask
    return acc


def reconstruct(acc: Accumulators) -> np.ndarray:
    """``A_P / A_W``; ``[N, H, W]`` (or ``[H, W]`` for one channel)."""
    if not np.all(acc.A_W > 0):
        ys, xs = np.nonzero(~(acc.A_W > 0))
        raise CoverageError(f"{ys.size} pixels have zero blend weight, first at {(int(ys[0]), int(xs[0]))}")
    out = acc.A_P / acc.A_W
    return out[0] if out.shape[0] == 1 else out


@dataclass
class SegmentationMap:
    labels: np.ndarray  # [H, W] int
    class_names: list[str]
    probs: np.ndarray  # [H, W, N] after softmax (and CRF when enabled)
    probs_pre_crf: np.ndarray = field(repr=False, default=None)


# (left_window, right_window, prompts, disparity_window) -> probabilities [N, h, w]
WindowPredictor = Callable[[np.ndarray, np.ndarray, Sequence[str], "DisparityMap | None"], np.ndarray]


def model_predictor(model) -> WindowPredictor:
    def predict(left, right, prompts, disparity):
        if model.cfg.sdaf_enabled and disparity is None:
            raise InputError("disparity is required for every window while SDAF is enabled")
        return expit(model.predict_logits(left, right, list(prompts), disparity))
    return predict


def _crop_disp(disparity, y: int, x: int, h: int, w: int):
    if disparity is None:
        return None
    values = disparity.values if isinstance(disparity, DisparityMap) else np.asarray(disparity)
    return DisparityMap(values[y:y + h, x:x + w].copy())


def tiled_probabilities(left: np.ndarray, right: np.ndarray, prompts: Sequence[str], predictor: WindowPredictor,
                        patch: int, disparity=None, order: Iterable[int] | None = None,
                        eps: float = BLEND_EPS) -> np.ndarray:
    """Blended per-prompt probability maps ``[N, H, W]`` over the full image."""
    left, right = np.asarray(left), np.asarray(right)
    if left.shape != right.shape:
        raise InputError(f"left {left.shape} and right {right.shape} differ")
    H, W = left.shape[:2]
    if disparity is not None:
        dshape = disparity.shape if isinstance(disparity, DisparityMap) else np.shape(disparity)
        if tuple(dshape) != (H, W):
            raise InputError(f"disparity is {tuple(dshape)}, image is {(H, W)}")
    plan = plan_tiles(H, W, patch)
    mask = cosine_blend_mask(*plan.patch, eps=eps)
    acc = Accumulators.zeros((H, W), len(prompts))
    h, w = plan.patch
    idx = range(len(plan)) if order is None else order
    for i in idx:
        y, x = plan.windows[i]
        pred = predictor(left[y:y + h, x:x + w], right[y:y + h, x:x + w], prompts, _crop_disp(disparity, y, x, h, w))
        accumulate(acc, pred, (y, x), mask)
    out = acc.A_P / np.where(acc.A_W > 0, acc.A_W, 1.0)
    if not np.all(acc.A_W > 0):
        reconstruct(acc)  # raises with the location
    return out


def multilabel_segment(left: np.ndarray, right: np.ndarray, prompts: Sequence[str], model=None,
                       crf_cfg: CRFConfig | None = None, disparity=None, use_crf: bool = True,
                       predictor: WindowPredictor | None = None, patch: int | None = None) -> SegmentationMap:
    """Label map over ``prompts`` for a full-resolution stereo pair.

    Repeated prompts are evaluated once and their channel copied. The guide
    image for the CRF is the left view on the 0-255 scale.
    """
    prompts = list(prompts)
    if not prompts:
        raise InputError("at least one prompt is required")
    if len(prompts) < 2:
        raise InputError("multi-label segmentation needs at least two prompts (e.g. add 'background')")
    if predictor is None:
        if model is None:
            raise InputError("either a model or a predictor is required")
        predictor = model_predictor(model)
    if patch is None:
        if model is None:
            raise InputError("patch size is required with a custom predictor")
        patch = model.cfg.resolution
    unique = list(dict.fromkeys(prompts))
    maps = tiled_probabilities(left, right, unique, predictor, patch, disparity)
    stacked = np.stack([maps[unique.index(p)] for p in prompts], axis=-1)
    probs = softmax(stacked, axis=-1)
    refined = probs
    if use_crf:
        guide = np.asarray(left)
        if guide.dtype != np.uint8:
            lo, hi = float(guide.min()), float(guide.max())
            guide = (guide - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(guide, dtype=np.float64)
        refined = crf_refine(probs, guide, crf_cfg)
    labels = np.argmax(refined, axis=-1).astype(np.int32)
    return SegmentationMap(labels, prompts, refined, probs)
