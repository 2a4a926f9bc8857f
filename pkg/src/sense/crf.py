"""Fully connected CRF with Gaussian pairwise kernels, solved by mean field.

Energy per pixel ``i`` and label ``l``: unary ``-log p_i(l)`` plus a Potts
pairwise term over all other pixels ``j`` with two kernels::

    smoothness  w_s * exp(-|p_i - p_j|^2 / (2 sxy_s^2))
    appearance  w_a * exp(-|p_i - p_j|^2 / (2 sxy_a^2) - |I_i - I_j|^2 / (2 srgb^2))

Kernels are row-normalized (each pixel's weights over ``j != i`` sum to
one), so a pairwise weight bounds the size of the message it can send.
Small rasters use the exact dense kernel. Large rasters use a separable
filter for the smoothness kernel and a permutohedral lattice for the
appearance kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.sparse import csr_matrix
from scipy.special import softmax

from sense.errors import InputError


@dataclass
class CRFConfig:
    gauss_sxy: float = 3.0
    gauss_weight: float = 3.0
    bilateral_sxy: float = 49.0
    bilateral_srgb: float = 5.0
    bilateral_weight: float = 4.0
    iterations: int = 5
    method: str = "auto"  # auto | exact | lattice
    exact_max_pixels: int = 4096
    eps: float = 1e-8


def _features(h: int, w: int, image: np.ndarray | None, sxy: float, srgb: float | None) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cols = [yy.ravel() / sxy, xx.ravel() / sxy]
    if srgb is not None:
        img = np.asarray(image, dtype=np.float64).reshape(h * w, -1)
        cols.extend(img[:, c] / srgb for c in range(img.shape[1]))
    return np.stack(cols, axis=1)


class _ExactKernel:
    """Dense ``exp(-|f_i - f_j|^2 / 2)`` with zero diagonal, row-normalized."""

    def __init__(self, feats: np.ndarray):
        sq = np.sum(feats ** 2, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * feats @ feats.T, 0.0)
        k = np.exp(-0.5 * d2)
        np.fill_diagonal(k, 0.0)
        norm = k.sum(axis=1, keepdims=True)
        self.k = k / np.maximum(norm, 1e-300)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.k @ q


class _SeparableGaussian:
    """Spatial-only Gaussian kernel applied by two 1-D passes (zero outside the image)."""

    def __init__(self, h: int, w: int, sxy: float):
        r = max(1, int(np.ceil(4 * sxy)))
        taps = np.arange(-r, r + 1, dtype=np.float64)
        self.kernel = np.exp(-0.5 * (taps / sxy) ** 2)
        self.h, self.w = h, w
        ones = np.ones((h * w, 1))
        self.norm = np.maximum(self._filter(ones) - ones, 1e-300)

    def _filter(self, q: np.ndarray) -> np.ndarray:
        x = q.reshape(self.h, self.w, -1)
        x = correlate1d(x, self.kernel, axis=0, mode="constant")
        x = correlate1d(x, self.kernel, axis=1, mode="constant")
        return x.reshape(self.h * self.w, -1)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        # exclude self (center tap weight 1)
        return (self._filter(q) - q) / self.norm


class PermutohedralLattice:
    """Approximate Gaussian filtering in ``d`` feature dimensions.

    Splat onto the enclosing simplex vertices of the permutohedral lattice,
    blur along each of the ``d + 1`` lattice axes with a [1, 2, 1] kernel,
    then slice back with the same barycentric weights.
    """

    def __init__(self, feats: np.ndarray):
        n, d = feats.shape
        self.n, self.d = n, d
        inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
        scale = inv_std / np.sqrt((np.arange(d) + 2.0) * (np.arange(d) + 1.0))
        cf = feats * scale
        elevated = np.zeros((n, d + 1))
        sm = np.zeros(n)
        for j in range(d, 0, -1):
            elevated[:, j] = sm - j * cf[:, j - 1]
            sm += cf[:, j - 1]
        elevated[:, 0] = sm

        v = elevated / (d + 1)
        up = np.ceil(v) * (d + 1)
        down = np.floor(v) * (d + 1)
        rem0 = np.where(up - elevated < elevated - down, up, down)
        total = np.round(rem0.sum(axis=1) / (d + 1)).astype(np.int64)

        diff = elevated - rem0
        # rank[i] = number of coordinates with a larger residual (ties by index)
        rank = np.zeros((n, d + 1), dtype=np.int64)
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                lt = diff[:, i] < diff[:, j]
                rank[:, i] += lt
                rank[:, j] += ~lt
        pos = total > 0
        neg = total < 0
        t = total[:, None]
        fix_pos = pos[:, None] & (rank >= d + 1 - t)
        fix_neg = neg[:, None] & (rank < -t)
        rem0 = rem0 - (d + 1) * fix_pos + (d + 1) * fix_neg
        rank = rank + t - (d + 1) * fix_pos + (d + 1) * fix_neg
        rem0 = rem0.astype(np.int64)

        bary = np.zeros((n, d + 2))
        val = (elevated - rem0) / (d + 1)
        rows = np.arange(n)[:, None]
        np.add.at(bary, (rows, d - rank), val)
        np.add.at(bary, (rows, d + 1 - rank), -val)
        bary[:, 0] += 1.0 + bary[:, d + 1]
        self.bary = bary[:, : d + 1]

        # canonical simplex offsets: vertex k adds k to coords with rank <= d-k, k-(d+1) otherwise
        keys = np.empty((n, d + 1, d), dtype=np.int64)
        for k in range(d + 1):
            offs = np.where(rank[:, :d] <= d - k, k, k - (d + 1))
            keys[:, k] = rem0[:, :d] + offs
        flat = keys.reshape(-1, d)
        self._lo = flat.min(axis=0) - d - 2
        span = flat.max(axis=0) + d + 2 - self._lo + 1
        self._radix = np.cumprod(np.r_[1, span[:-1]]).astype(np.int64)
        if np.prod(span.astype(np.float64)) > 2 ** 62:
            raise InputError("lattice too large to index; increase the kernel bandwidths")
        codes = self._encode(flat)
        self.codes, self.index = np.unique(codes, return_inverse=True)
        self.index = self.index.reshape(n, d + 1)
        m = self.codes.size

        lattice_keys = self._decode(self.codes)
        # one sparse [1, 2, 1] / 4 blur per lattice axis; missing neighbors contribute zero
        rows = np.arange(m)
        self.blurs = []
        for j in range(d + 1):
            n1 = lattice_keys - 1
            n2 = lattice_keys + 1
            if j < d:
                n1[:, j] = lattice_keys[:, j] + d
                n2[:, j] = lattice_keys[:, j] - d
            r, c, v = [rows], [rows], [np.full(m, 0.5)]
            for nb in (self._lookup(n1), self._lookup(n2)):
                ok = nb >= 0
                r.append(rows[ok])
                c.append(nb[ok])
                v.append(np.full(int(ok.sum()), 0.25))
            self.blurs.append(csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(m, m)))
        self.m = m
        # splat matrix: lattice vertex <- pixel with barycentric weight
        self.splat = csr_matrix((self.bary.ravel(), (self.index.ravel(), np.repeat(np.arange(n), d + 1))),
                                shape=(m, n))
        self.slice = self.splat.T.tocsr()

    def _encode(self, keys: np.ndarray) -> np.ndarray:
        return ((keys - self._lo) * self._radix).sum(axis=1)

    def _decode(self, codes: np.ndarray) -> np.ndarray:
        span_codes = codes.copy()
        out = np.empty((codes.size, self.d), dtype=np.int64)
        for i in range(self.d - 1, -1, -1):
            out[:, i], span_codes = np.divmod(span_codes, self._radix[i])
        return out + self._lo

    def _lookup(self, keys: np.ndarray) -> np.ndarray:
        codes = self._encode(keys)
        idx = np.searchsorted(self.codes, codes)
        idx = np.clip(idx, 0, self.codes.size - 1)
        return np.where(self.codes[idx] == codes, idx, -1)

    def filter(self, values: np.ndarray) -> np.ndarray:
        grid = self.splat @ values
        for blur in self.blurs:
            grid = blur @ grid
        return self.slice @ grid


class _LatticeKernel:
    def __init__(self, feats: np.ndarray):
        self.lattice = PermutohedralLattice(feats)
        self.norm = np.maximum(self.lattice.filter(np.ones((feats.shape[0], 1))), 1e-300)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.lattice.filter(q) / self.norm


def crf_refine(prob_volume: np.ndarray, guide_image: np.ndarray, cfg: CRFConfig | None = None) -> np.ndarray:
    """Mean-field refinement of an ``[H, W, N]`` probability volume.

    ``guide_image`` is ``[H, W, 3]`` on the 0-255 scale. The output is
    renormalized per pixel. With both pairwise weights at zero the unary
    fixed point is the input itself, which is returned unchanged.
    """
    cfg = cfg or CRFConfig()
    p = np.asarray(prob_volume, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] < 2:
        raise InputError(f"CRF needs an [H, W, N>=2] volume, got shape {p.shape}")
    h, w, n = p.shape
    if guide_image is not None and np.asarray(guide_image).shape[:2] != (h, w):
        raise InputError("guide image and probability volume differ in size")
    if cfg.gauss_weight == 0 and cfg.bilateral_weight == 0:
        return p.copy()
    if guide_image is None:
        guide_image = np.zeros((h, w, 3))
    unary = -np.log(np.clip(p.reshape(h * w, n), cfg.eps, 1.0))

    exact = cfg.method == "exact" or (cfg.method == "auto" and h * w <= cfg.exact_max_pixels)
    kernels = []
    if cfg.gauss_weight:
        f = _features(h, w, None, cfg.gauss_sxy, None)
        kernels.append((cfg.gauss_weight, _ExactKernel(f) if exact else _SeparableGaussian(h, w, cfg.gauss_sxy)))
    if cfg.bilateral_weight:
        f = _features(h, w, guide_image, cfg.bilateral_sxy, cfg.bilateral_srgb)
        kernels.append((cfg.bilateral_weight, _ExactKernel(f) if exact else _LatticeKernel(f)))

    q = softmax(-unary, axis=1)
    for _ in range(cfg.iterations):
        # Potts: penalty for label l is sum_j k_ij (1 - Q_j(l)); the constant part cancels
        energy = -unary
        for weight, kernel in kernels:
            energy = energy + weight * kernel(q)
        q = softmax(energy, axis=1)
    q /= q.sum(axis=1, keepdims=True)
    return q.reshape(h, w, n)
