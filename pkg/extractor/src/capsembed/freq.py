"""Frequency-domain embedding, re-implemented from the published
pipeline formula (independent of the detector's code):

grayscale (BT.601) -> bilinear resize to 320x320 (half-pixel centres,
edge clamp) -> orthonormal type-II 2-D DCT -> log(|c| + 1e-12) ->
per-image mean subtraction and std division (+1e-12) -> exact
fractional-area pooling onto a 24x32 grid -> row-major flatten to 768.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.fft import dct

SIZE = 320
POOL_ROWS, POOL_COLS = 24, 32
EPS = 1e-12
LUMA = np.array([0.299, 0.587, 0.114])


@lru_cache(maxsize=None)
def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w


@lru_cache(maxsize=None)
def _pool_weights(n_in: int, n_out: int) -> np.ndarray:
    w = np.zeros((n_out, n_in))
    cell = n_in / n_out
    for i in range(n_out):
        lo, hi = i * cell, (i + 1) * cell
        for y in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(y + 1.0, hi) - max(float(y), lo)
            if overlap > 0:
                w[i, y] = overlap / cell
    return w


def frequency_embedding(pixels: np.ndarray) -> np.ndarray:
    """768-dim log-DCT embedding of an (H, W) or (H, W, C) image in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        gray = arr[:, :, 0] if arr.shape[2] == 1 else arr @ LUMA
    elif arr.ndim == 2:
        gray = arr
    else:
        raise ValueError(f"expected a 2-D or 3-D pixel array, got shape {arr.shape}")
    h, w = gray.shape
    resized = _resize_weights(h, SIZE) @ gray @ _resize_weights(w, SIZE).T
    coeffs = dct(dct(resized, type=2, norm="ortho", axis=0), type=2, norm="ortho", axis=1)
    logmag = np.log(np.abs(coeffs) + EPS)
    centered = logmag - logmag.mean()
    normed = centered / (np.sqrt(np.mean(centered * centered)) + EPS)
    pooled = _pool_weights(SIZE, POOL_ROWS) @ normed @ _pool_weights(SIZE, POOL_COLS).T
    return pooled.reshape(POOL_ROWS * POOL_COLS)
