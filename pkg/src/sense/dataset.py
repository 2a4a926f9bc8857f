"""Referring-expression stereo samples: manifests, synthetic corpora, batches."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from sense.disparity import read_disparity_file, write_pfm
from sense.errors import ConfigError, FormatError, InputError, MissingFileError

SAMPLE_FIELDS = ("id", "left_path", "right_path", "phrase", "mask_path")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
}
SHAPES = ("circle", "square", "triangle")


@dataclass
class Sample:
    id: str
    left_path: str
    right_path: str
    phrase: str
    mask_path: str
    disparity_path: str | None = None

    def __post_init__(self):
        if not isinstance(self.phrase, str) or not self.phrase.strip():
            raise FormatError(f"sample {self.id!r}: phrase must be a non-empty string")


@dataclass
class StereoSample:
    """A sample with its rasters loaded: uint8 views, boolean mask, raw disparity."""

    id: str
    left: np.ndarray
    right: np.ndarray
    mask: np.ndarray
    phrase: str
    disparity: np.ndarray | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise FormatError(f"sample {self.id!r}: left {self.left.shape} and right {self.right.shape} differ")
        if self.mask.shape != self.left.shape[:2]:
            raise FormatError(f"sample {self.id!r}: mask {self.mask.shape} vs image {self.left.shape[:2]}")
        if self.disparity is not None and self.disparity.shape != self.left.shape[:2]:
            raise FormatError(f"sample {self.id!r}: disparity {self.disparity.shape} vs image {self.left.shape[:2]}")


@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise InputError("stereo views must have equal shapes")


@dataclass
class Batch:
    pairs: list[StereoPair]
    phrases: list[str]
    targets: np.ndarray  # [B, H, W] float32 in {0, 1}
    disparities: list[np.ndarray | None]
    negative_flags: np.ndarray
    source_ids: list[str] = field(default_factory=list)
    windows: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def load_manifest(path) -> list[Sample]:
    """Line-delimited JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    base = path.parent
    samples, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise FormatError(f"{path}:{lineno}: expected a JSON object")
        missing = [k for k in SAMPLE_FIELDS if k not in rec]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        unknown = set(rec) - set(SAMPLE_FIELDS) - {"disparity_path"}
        if unknown:
            raise FormatError(f"{path}:{lineno}: unknown field(s) {', '.join(sorted(unknown))}")
        sid = str(rec["id"])
        if sid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        for k in ("left_path", "right_path", "mask_path", "disparity_path"):
            if rec.get(k):
                p = Path(rec[k])
                rec[k] = str(p if p.is_absolute() else base / p)
        try:
            samples.append(Sample(**{**rec, "id": sid}))
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return samples


def _read_image(path) -> np.ndarray:
    if not Path(path).exists():
        raise MissingFileError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    if not Path(path).exists():
        raise MissingFileError(f"mask not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr != 0


def load_sample(sample: Sample) -> StereoSample:
    left = _read_image(sample.left_path)
    disp = None
    if sample.disparity_path:
        disp = read_disparity_file(sample.disparity_path, left.shape[:2]).values
    return StereoSample(sample.id, left, _read_image(sample.right_path), read_mask(sample.mask_path),
                        sample.phrase, disp)


def _as_loaded(samples) -> list[StereoSample]:
    return [s if isinstance(s, StereoSample) else load_sample(s) for s in samples]


def make_batch(samples: Sequence, batch_size: int, negative_fraction: float, rng_seed: int,
               resolution: int | None = None, random_crop: bool = True) -> Batch:
    """Draw a batch and turn a fraction of it into phrase-swapped negatives.

    ``round(negative_fraction * batch_size)`` entries (round half to even)
    get a phrase taken from a different sample and an all-zero target.
    When ``resolution`` is below the sample size, left/right/mask/disparity
    share one crop window (random, or centered if ``random_crop`` is false).
    """
    if not 0.0 <= negative_fraction <= 1.0:
        raise ConfigError(f"negative_fraction must be in [0, 1], got {negative_fraction}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    loaded = _as_loaded(samples)
    if not loaded:
        raise InputError("no samples to batch")
    rng = np.random.default_rng(rng_seed)
    n_neg = int(round(negative_fraction * batch_size))
    if n_neg and len({s.phrase for s in loaded}) < 2:
        raise ConfigError("negatives need at least 2 distinct phrases")

    if batch_size <= len(loaded):
        picks = rng.permutation(len(loaded))[:batch_size]
    else:
        picks = rng.integers(0, len(loaded), size=batch_size)
    neg = np.zeros(batch_size, dtype=bool)
    neg[rng.permutation(batch_size)[:n_neg]] = True

    pairs, phrases, targets, disps, ids, windows = [], [], [], [], [], []
    for slot, k in enumerate(picks):
        s = loaded[k]
        h, w = s.mask.shape
        res_h = res_w = resolution
        if resolution is None:
            res_h, res_w = h, w
        if h < res_h or w < res_w:
            raise InputError(f"sample {s.id!r} ({h}x{w}) is smaller than resolution {resolution}")
        if random_crop:
            y, x = int(rng.integers(0, h - res_h + 1)), int(rng.integers(0, w - res_w + 1))
        else:
            y, x = (h - res_h) // 2, (w - res_w) // 2
        sl = (slice(y, y + res_h), slice(x, x + res_w))
        phrase, target = s.phrase, s.mask[sl].astype(np.float32)
        if neg[slot]:
            donors = [j for j, o in enumerate(loaded) if j != k and o.phrase != s.phrase]
            phrase = loaded[donors[int(rng.integers(len(donors)))]].phrase
            target = np.zeros_like(target)
        pairs.append(StereoPair(s.left[sl], s.right[sl]))
        phrases.append(phrase)
        targets.append(target)
        disps.append(None if s.disparity is None else s.disparity[sl])
        ids.append(s.id)
        windows.append((y, x))
    return Batch(pairs, phrases, np.stack(targets), disps, neg, ids, windows)


# -- synthetic corpus ------------------------------------------------------


def _shape_mask(kind: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upward triangle inscribed in the circle of radius r
    top, base = cy - r, cy + r * 0.6
    half = (yy - top) / (base - top) * r * 0.95
    return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(60, 170, size=3)
    noise = np.stack([gaussian_filter(rng.standard_normal((h, w)), sigma=h / 12, mode="wrap") for _ in range(3)], -1)
    noise /= np.abs(noise).max() + 1e-9
    fine = rng.standard_normal((h, w, 1)) * 6
    return np.clip(base + 40 * noise + fine, 0, 255)


def render_scene(rng: np.random.Generator, resolution: int):
    """Draw one scene: returns left, right (uint8), per-shape masks, shapes, disparity."""
    h = w = resolution
    bg = _background(rng, h, w)
    d_near, d_slope = rng.uniform(2, 8), rng.uniform(0, 8)
    xx = np.arange(w, dtype=np.float64)
    bg_disp = np.broadcast_to(d_near + d_slope * xx / w, (h, w)).copy()

    n_shapes = int(rng.integers(2, 4))
    combos = [(c, s) for c in COLORS for s in SHAPES]
    chosen = [combos[i] for i in rng.choice(len(combos), size=n_shapes, replace=False)]
    shapes = []
    for color, kind in chosen:
        for _ in range(200):
            r = rng.uniform(resolution / 9, resolution / 5.5)
            cx = rng.uniform(r + 2 + 62 * resolution / 352, w - r - 2)
            cy = rng.uniform(r + 2, h - r - 2)
            if all((cx - o["cx"]) ** 2 + (cy - o["cy"]) ** 2 > (r + o["r"] + 4) ** 2 for o in shapes):
                break
        d = float(rng.uniform(20, 60) * resolution / 352)
        shapes.append(dict(color=color, kind=kind, cx=cx, cy=cy, r=r, d=d))

    left = bg.copy()
    disp = bg_disp.copy()
    yy, xr = np.mgrid[0:h, 0:w].astype(np.float64)
    right = np.stack(
        [map_coordinates(bg[..., c], [yy, np.clip(xr + bg_disp, 0, w - 1)], order=1, mode="nearest") for c in range(3)],
        -1,
    )
    masks = []
    for s in sorted(shapes, key=lambda s: s["d"]):
        m_left = _shape_mask(s["kind"], s["cy"], s["cx"], s["r"], h, w)
        m_right = _shape_mask(s["kind"], s["cy"], s["cx"] - s["d"], s["r"], h, w)
        shade = np.asarray(COLORS[s["color"]], dtype=np.float64)
        left[m_left] = shade
        right[m_right] = shade
        disp[m_left] = s["d"]
    for s in shapes:
        masks.append(_shape_mask(s["kind"], s["cy"], s["cx"], s["r"], h, w))
    return left.round().astype(np.uint8), right.round().astype(np.uint8), masks, shapes, disp.astype(np.float32)


def _phrase_for(rng: np.random.Generator, target: int, shapes: list[dict]) -> str:
    s = shapes[target]
    kinds = [o["kind"] for o in shapes]
    options = [f"{s['color']} {s['kind']}"]
    if kinds.count(s["kind"]) == 1:
        for j, o in enumerate(shapes):
            if j == target or kinds.count(o["kind"]) != 1:
                continue
            rel = "left of" if s["cx"] < o["cx"] else "right of"
            options.append(f"{s['kind']} {rel} {o['kind']}")
    return options[int(rng.integers(len(options)))]


def synth_corpus(n: int, resolution: int, seed: int, out_dir) -> list[Sample]:
    """Write ``n`` procedurally drawn stereo samples plus ``manifest.jsonl``.

    Each scene is a textured background on a slanted plane with 2-3 colored
    shapes floating at constant disparity in front. The right view is the
    left view warped by that disparity. Same seed, same bytes.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        left, right, masks, shapes, disp = render_scene(rng, resolution)
        target = int(rng.integers(len(shapes)))
        phrase = _phrase_for(rng, target, shapes)
        sid = f"synth_{i:05d}"
        names = dict(left_path=f"{sid}_left.png", right_path=f"{sid}_right.png",
                     mask_path=f"{sid}_mask.png", disparity_path=f"{sid}_disp.pfm")
        Image.fromarray(left).save(out / names["left_path"])
        Image.fromarray(right).save(out / names["right_path"])
        Image.fromarray(masks[target].astype(np.uint8) * 255).save(out / names["mask_path"])
        write_pfm(out / names["disparity_path"], disp)
        samples.append(Sample(id=sid, phrase=phrase, **names))
    with open(out / "manifest.jsonl", "w") as f:
        for s in samples:
            f.write(json.dumps(asdict(s)) + "\n")
    return [Sample(**{**asdict(s), **{k: str(out / v) for k, v in asdict(s).items() if k.endswith("_path")}})
            for s in samples]


# -- multi-label (zero-shot) corpus ----------------------------------------

ZEROSHOT_CLASSES = ("background",) + SHAPES
ZEROSHOT_FIELDS = ("id", "left_path", "right_path", "label_path")


@dataclass
class LabeledSample:
    id: str
    left_path: str
    right_path: str
    label_path: str
    disparity_path: str | None = None


def synth_zeroshot(n: int, resolution: int, seed: int, out_dir) -> tuple[list[LabeledSample], list[str]]:
    """Scenes like :func:`synth_corpus` with a label raster (0 = background, then one class per shape kind).

    Writes ``zeroshot.jsonl`` and ``classes.txt`` next to the rasters.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        left, right, masks, shapes, disp = render_scene(rng, resolution)
        labels = np.zeros(left.shape[:2], dtype=np.uint8)
        for m, s in zip(masks, shapes):
            labels[m] = ZEROSHOT_CLASSES.index(s["kind"])
        sid = f"zs_{i:05d}"
        names = dict(left_path=f"{sid}_left.png", right_path=f"{sid}_right.png",
                     label_path=f"{sid}_labels.png", disparity_path=f"{sid}_disp.pfm")
        Image.fromarray(left).save(out / names["left_path"])
        Image.fromarray(right).save(out / names["right_path"])
        Image.fromarray(labels).save(out / names["label_path"])
        write_pfm(out / names["disparity_path"], disp)
        samples.append(LabeledSample(id=sid, **names))
    with open(out / "zeroshot.jsonl", "w") as f:
        for s in samples:
            f.write(json.dumps(asdict(s)) + "\n")
    (out / "classes.txt").write_text("\n".join(ZEROSHOT_CLASSES) + "\n")
    return load_zeroshot_manifest(out / "zeroshot.jsonl"), list(ZEROSHOT_CLASSES)


def load_zeroshot_manifest(path) -> list[LabeledSample]:
    """Line-delimited JSON with ``id, left_path, right_path, label_path[, disparity_path]``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    out, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        missing = [k for k in ZEROSHOT_FIELDS if k not in rec]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        unknown = set(rec) - set(ZEROSHOT_FIELDS) - {"disparity_path"}
        if unknown:
            raise FormatError(f"{path}:{lineno}: unknown field(s) {', '.join(sorted(unknown))}")
        if rec["id"] in seen:
            raise FormatError(f"{path}:{lineno}: duplicate sample id {rec['id']!r}")
        seen.add(rec["id"])
        for k in ("left_path", "right_path", "label_path", "disparity_path"):
            if rec.get(k):
                p = Path(rec[k])
                rec[k] = str(p if p.is_absolute() else path.parent / p)
        out.append(LabeledSample(**rec))
    return out


def read_labels(path) -> np.ndarray:
    if not Path(path).exists():
        raise MissingFileError(f"label raster not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: label raster must be single-channel")
    return arr.astype(np.int64)
