"""Metrics for referring-expression and multi-label evaluation, plus timing."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from sense.errors import InputError

# reference context only, never asserted (RTX 3090 Ti)
PUBLISHED_RUNTIME_MS = {"SENSE-352": (194.74, 17.12)}


@dataclass
class MetricReport:
    miou: float
    iou_fg: float
    ap: float
    per_class_iou: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RuntimeReport:
    total_ms: float
    total_without_disparity_ms: float
    disparity_ms: float
    encode_ms: float
    decode_ms: float
    tiling_ms: float
    repeats: int
    hardware: str
    reference_ms: dict = field(default_factory=lambda: dict(PUBLISHED_RUNTIME_MS))

    def to_dict(self) -> dict:
        return asdict(self)


def _valid(target: np.ndarray, void: np.ndarray | None) -> np.ndarray:
    return np.ones(target.shape, dtype=bool) if void is None else ~np.asarray(void, dtype=bool)


def binary_iou(pred, target, threshold: float = 0.5, region: str = "foreground", void=None) -> float:
    """IoU of thresholded ``pred`` against binary ``target`` on one region.

    ``region="background"`` compares the complements. Both sets empty
    counts as perfect agreement (1.0).
    """
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"prediction {pred.shape} vs target {target.shape}")
    valid = _valid(target, void)
    p = pred >= threshold
    t = target.astype(bool)
    if region == "background":
        p, t = ~p, ~t
    elif region != "foreground":
        raise InputError(f"region must be foreground or background, got {region!r}")
    inter = np.count_nonzero(p & t & valid)
    union = np.count_nonzero((p | t) & valid)
    return 1.0 if union == 0 else inter / union


def referring_miou(preds, targets, threshold: float = 0.5, foreground_only: bool = False, voids=None) -> float:
    """Dataset mean over samples of mean(IoU_fg, IoU_bg) (or IoU_fg alone)."""
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, targets = [preds], [targets]
    voids = voids if voids is not None else [None] * len(preds)
    scores = []
    for p, t, v in zip(preds, targets, voids):
        fg = binary_iou(p, t, threshold, "foreground", v)
        scores.append(fg if foreground_only else 0.5 * (fg + binary_iou(p, t, threshold, "background", v)))
    return float(np.mean(scores))


def average_precision(scores, labels) -> float:
    """Area under the step precision-recall curve of pooled pixel scores.

    Tied scores form a single operating point, so the result equals a
    sweep over every distinct threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise InputError("scores and labels differ in size")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise InputError("average precision needs at least one positive and one negative pixel")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(recall_gain * precision))


def zero_shot_miou(seg, gt, classes: Sequence[str], void_label: int = 255) -> MetricReport:
    """Class-wise IoU pooled over one or more label maps; mean over classes present in GT."""
    segs = [seg] if isinstance(seg, np.ndarray) else list(seg)
    gts = [gt] if isinstance(gt, np.ndarray) else list(gt)
    n = len(classes)
    inter, union, present = np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool)
    labeled = 0
    for s, g in zip(segs, gts):
        s, g = np.asarray(s), np.asarray(g)
        if s.shape != g.shape:
            raise InputError(f"segmentation {s.shape} vs ground truth {g.shape}")
        valid = g != void_label
        labeled += int(valid.sum())
        for c in range(n):
            ps, gs = (s == c) & valid, (g == c) & valid
            inter[c] += np.count_nonzero(ps & gs)
            union[c] += np.count_nonzero(ps | gs)
            present[c] |= gs.any()
    if labeled == 0:
        raise InputError("ground truth has no labeled pixels")
    per_class = {classes[c]: float(inter[c] / union[c]) for c in range(n) if present[c]}
    miou = float(np.mean(list(per_class.values())))
    return MetricReport(miou=miou, iou_fg=float("nan"), ap=float("nan"), per_class_iou=per_class,
                        n_samples=len(segs), threshold=float("nan"))


def referring_report(probs: Sequence[np.ndarray], targets: Sequence[np.ndarray], threshold: float = 0.5,
                     foreground_only: bool = False) -> MetricReport:
    targets = [np.asarray(t).astype(bool) for t in targets]
    pooled_s = np.concatenate([np.asarray(p).ravel() for p in probs])
    pooled_y = np.concatenate([t.ravel() for t in targets])
    try:
        ap = average_precision(pooled_s, pooled_y)
    except InputError:
        ap = float("nan")
    fg = float(np.mean([binary_iou(p, t, threshold) for p, t in zip(probs, targets)]))
    return MetricReport(
        miou=referring_miou(list(probs), targets, threshold, foreground_only),
        iou_fg=fg, ap=ap, n_samples=len(targets), threshold=threshold,
    )


@torch.no_grad()
def predict_samples(model, samples, batch_size: int = 8) -> list[np.ndarray]:
    """Sigmoid maps for loaded samples at model resolution (center crop)."""
    from sense.dataset import make_batch
    from sense.training import forward_batch

    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = make_batch(chunk, len(chunk), 0.0, 0, resolution=model.cfg.resolution, random_crop=False)
        # keep the original sample order
        order = {sid: j for j, sid in enumerate(batch.source_ids)}
        logits = forward_batch(model, batch).double()
        probs = torch.sigmoid(logits).numpy()
        out.extend(probs[order[s.id]] for s in chunk)
    return out


def evaluate_referring(model, samples, threshold: float = 0.5, foreground_only: bool = False) -> MetricReport:
    from sense.dataset import _as_loaded

    loaded = _as_loaded(samples)
    res = model.cfg.resolution
    probs = predict_samples(model, loaded)
    targets = []
    for s in loaded:
        h, w = s.mask.shape
        y, x = (h - res) // 2, (w - res) // 2
        targets.append(s.mask[y:y + res, x:x + res])
    return referring_report(probs, targets, threshold, foreground_only)


def _hardware() -> str:
    return f"{platform.processor() or platform.machine()} / torch {torch.__version__} / threads {torch.get_num_threads()}"


def benchmark(model, left: np.ndarray, right: np.ndarray, prompt: str,
              disparity_fn: Callable[[], np.ndarray], repeats: int = 5, warmup: int = 1,
              tiling_fn: Callable[[], object] | None = None) -> RuntimeReport:
    """Median per-stage wall time for one query.

    ``disparity_fn`` stands in for the stereo matcher (loading a file or
    generating a raster); the without-disparity figure excludes it.
    """
    from sense.training import _pair_tensor

    if repeats < 1:
        raise InputError("repeats must be >= 1")
    model.eval()
    rows = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        d = disparity_fn()
        t1 = time.perf_counter()
        with torch.no_grad():
            feats = model.encode_pair(_pair_tensor(model, left)[None], _pair_tensor(model, right)[None])
            text = model.encode_prompts([prompt])
            t2 = time.perf_counter()
            dt = torch.from_numpy(np.asarray(d, dtype=np.float32))[None] if model.cfg.sdaf_enabled else None
            model.head(feats, text, dt)
        t3 = time.perf_counter()
        t_tile = 0.0
        if tiling_fn is not None:
            s = time.perf_counter()
            tiling_fn()
            t_tile = time.perf_counter() - s
        if i >= warmup:
            rows.append((t1 - t0, t2 - t1, t3 - t2, t_tile))
    med = [statistics.median(c) * 1000 for c in zip(*rows)]
    disp_ms, enc_ms, dec_ms, tile_ms = med
    without = enc_ms + dec_ms + tile_ms
    return RuntimeReport(total_ms=without + disp_ms, total_without_disparity_ms=without, disparity_ms=disp_ms,
                         encode_ms=enc_ms, decode_ms=dec_ms, tiling_ms=tile_ms, repeats=repeats,
                         hardware=_hardware())
