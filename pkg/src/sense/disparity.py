"""Disparity maps from files or from a synthetic generator.

Two on-disk formats are understood:

* PFM, single channel (``Pf``), either endianness; rows stored bottom-up.
* DSP1: 16-byte little-endian header ``b"DSP1", u32 width, u32 height,
  u32 channels`` followed by ``channels*height*width`` float32 values,
  channel-major then row-major. Disparity files carry one channel; the
  same container holds multi-channel probability volumes.

The provider never resizes disparity. Crops are pure slicing, since
disparity values do not change under translation of the window.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from sense.errors import FormatError, InputError, MissingFileError
from sense.sdaf import MAX_DISPARITY, DisparityMap

DSP1_MAGIC = b"DSP1"
GENERATORS = ("planes", "ramps", "random-smooth")


def write_pfm(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(values).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    try:
        header, dims, scale, rest = data.split(b"\n", 3)
        if header.strip() != b"Pf":
            raise FormatError(f"{path}: not a single-channel PFM (header {header[:4]!r})")
        w, h = (int(v) for v in dims.split())
        scale = float(scale)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    if len(rest) < 4 * w * h:
        raise FormatError(f"{path}: PFM payload has {len(rest)} bytes, expected {4 * w * h}")
    arr = np.frombuffer(rest[: 4 * w * h], dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


def write_dsp1(path, values: np.ndarray) -> None:
    """Write a ``[H, W]`` raster or ``[C, H, W]`` volume."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(DSP1_MAGIC + struct.pack("<III", w, h, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_dsp1(path, volume: bool = False) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != DSP1_MAGIC:
        raise FormatError(f"{path}: missing DSP1 header")
    w, h, c = struct.unpack("<III", data[4:16])
    c = max(c, 1)
    n = w * h * c
    if len(data) - 16 != 4 * n:
        raise FormatError(f"{path}: payload is {len(data) - 16} bytes, header implies {4 * n}")
    arr = np.frombuffer(data[16:], dtype="<f4").reshape(c, h, w).astype(np.float32)
    if volume:
        return arr
    if c != 1:
        raise FormatError(f"{path}: expected a single-channel raster, found {c} channels")
    return arr[0]


def read_disparity_file(path, expected_shape: tuple[int, int] | None = None) -> DisparityMap:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"disparity file not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == DSP1_MAGIC:
        values = read_dsp1(path)
    elif magic[:2] in (b"Pf", b"PF"):
        values = read_pfm(path)
    else:
        raise FormatError(f"{path}: unrecognized disparity format (magic {magic!r})")
    if expected_shape is not None and values.shape != tuple(expected_shape):
        raise FormatError(f"{path}: disparity is {values.shape}, left image is {tuple(expected_shape)}")
    # holes (NaN) are filled with zero disparity
    values = np.where(np.isnan(values), np.float32(0), values)
    return DisparityMap(values, MAX_DISPARITY)


@dataclass(frozen=True)
class DisparitySource:
    kind: str = "file"
    root_path: str | None = None
    generator: str = "ramps"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("file", "synthetic"):
            raise InputError(f"disparity source kind must be 'file' or 'synthetic', got {self.kind!r}")
        if self.kind == "file" and not self.root_path:
            raise InputError("file disparity source needs root_path")
        if self.kind == "synthetic" and self.generator not in GENERATORS:
            raise InputError(f"unknown generator {self.generator!r}")


def load_disparity(sample_id: str, source: DisparitySource,
                   expected_shape: tuple[int, int] | None = None) -> DisparityMap:
    """Disparity for ``sample_id``: ``<root>/<id>.pfm`` or ``<root>/<id>.dsp``, or synthetic."""
    if source.kind == "synthetic":
        if expected_shape is None:
            raise InputError("synthetic disparity needs the image shape")
        return synthetic_disparity(expected_shape, source.generator, source.seed)
    root = Path(source.root_path)
    for ext in (".pfm", ".dsp"):
        p = root / f"{sample_id}{ext}"
        if p.exists():
            return read_disparity_file(p, expected_shape)
    raise MissingFileError(f"no disparity file for sample {sample_id!r} under {root}")


def synthetic_disparity(shape: tuple[int, int], generator: str = "ramps", seed: int = 0,
                        n_regions: int = 2) -> DisparityMap:
    """Deterministic disparity in [0, 192].

    ``planes``: ``n_regions`` constant regions (Voronoi cells of random seeds).
    ``ramps``: each row rises linearly from 0 at the left edge to 192 at the right.
    ``random-smooth``: Gaussian-blurred noise rescaled to span [0, 192].
    """
    h, w = shape
    if h < 1 or w < 1:
        raise InputError(f"shape must be at least 1x1, got {shape}")
    rng = np.random.default_rng(seed)
    if generator == "ramps":
        row = np.linspace(0.0, MAX_DISPARITY, w) if w > 1 else np.zeros(1)
        values = np.broadcast_to(row, (h, w))
    elif generator == "planes":
        n = min(n_regions, h * w)
        flat = rng.choice(h * w, size=n, replace=False)
        cy, cx = np.divmod(flat, w)
        yy, xx = np.mgrid[0:h, 0:w]
        dist = (yy[..., None] - cy) ** 2 + (xx[..., None] - cx) ** 2
        labels = dist.argmin(axis=-1)
        levels = rng.choice(193, size=n, replace=False).astype(np.float64)
        values = levels[labels]
    elif generator == "random-smooth":
        noise = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="reflect")
        lo, hi = noise.min(), noise.max()
        values = (noise - lo) / (hi - lo) * MAX_DISPARITY if hi > lo else np.zeros((h, w))
    else:
        raise InputError(f"unknown generator {generator!r}; expected one of {GENERATORS}")
    return DisparityMap(np.array(values, dtype=np.float32), MAX_DISPARITY)


def crop_disparity(d: DisparityMap, window: tuple[int, int, int, int]) -> DisparityMap:
    """Slice ``(y, x, h, w)`` out of ``d`` without touching values."""
    y, x, h, w = window
    H, W = d.shape
    if y < 0 or x < 0 or h < 1 or w < 1 or y + h > H or x + w > W:
        raise InputError(f"window {window} is outside the {H}x{W} disparity raster")
    return DisparityMap(d.values[y:y + h, x:x + w].copy(), d.max_disparity)
