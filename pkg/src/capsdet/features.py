"""Image ingestion, the frequency-domain embedding pipeline, and the
EMB1 on-disk format for (visual, text, frequency) embedding triples.

The frequency pipeline is built on the autodiff tensors so gradients can
flow from a classification loss back to raw pixels (used by the
image-space attacks and saliency maps). Every stage is separable-linear
(resize, DCT, pooling) or elementwise, so the whole map is cheap in both
directions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError

EMBED_DIM = 768
FREQ_SIZE = 320            # images are resized to FREQ_SIZE x FREQ_SIZE
POOL_ROWS, POOL_COLS = 24, 32   # 24 * 32 == EMBED_DIM
LOG_EPS = 1e-12
# ITU-R BT.601 luminance weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------
# images


@dataclass
class ImageBuffer:
    """H x W x C float image with all values in [0, 1]."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray  # (H, W, C) float64

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ContractError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
        arr = np.clip(arr, 0.0, 1.0)
        h, w, c = arr.shape
        return cls(h, w, c, arr)

    def gray(self) -> np.ndarray:
        """Luminance-weighted 2-D view (BT.601 weights for RGB)."""
        if self.channels == 1:
            return self.pixels[:, :, 0]
        return self.pixels @ LUMA_WEIGHTS


def load_ppm(path) -> ImageBuffer:
    """Load a binary PPM (P6) or PGM (P5) file with maxval 255."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def fail(msg):
        raise FormatError(f"{path}: {msg} (byte offset {pos})")

    def next_token():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos : pos + 1]
            if ch == b"#":
                while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        if pos >= len(raw):
            fail("unexpected end of header")
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        return raw[start:pos]

    magic = next_token()
    if magic not in (b"P5", b"P6"):
        fail(f"bad magic {magic!r}, expected P5 or P6")
    channels = 3 if magic == b"P6" else 1
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError:
        fail("non-numeric header field")
    if width <= 0 or height <= 0:
        fail(f"bad dimensions {width}x{height}")
    if maxval != 255:
        fail(f"unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace after maxval
    need = width * height * channels
    payload = raw[pos : pos + need]
    if len(payload) != need:
        fail(f"truncated payload: need {need} bytes, have {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(height, width, channels, arr.astype(np.float64) / 255.0)


def save_ppm(img: ImageBuffer, path) -> None:
    """Write a binary PPM (3 channels) or PGM (1 channel), maxval 255."""
    magic = b"P6" if img.channels == 3 else b"P5"
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------
# separable linear maps


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix: D @ D.T == I."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * j + 1) * k / (2 * n))
    d[0, :] /= np.sqrt(2.0)
    return d


@lru_cache(maxsize=None)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation weights, half-pixel-centre convention."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


@lru_cache(maxsize=None)
def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Exact fractional-area averaging weights (cell i covers
    [i*n_in/n_out, (i+1)*n_in/n_out))."""
    m = np.zeros((n_out, n_in))
    cell = n_in / n_out
    for i in range(n_out):
        lo, hi = i * cell, (i + 1) * cell
        for y in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(y + 1.0, hi) - max(float(y), lo)
            if overlap > 0:
                m[i, y] = overlap / cell
    return m


def dct2(img) -> np.ndarray:
    """Orthonormal 2-D type-II DCT of a single-channel image."""
    if isinstance(img, ImageBuffer):
        if img.channels != 1:
            raise ContractError(f"dct2 expects a single channel, got {img.channels}")
        x = img.pixels[:, :, 0]
    else:
        x = np.asarray(img, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError(f"dct2 expects a 2-D array, got shape {x.shape}")
    h, w = x.shape
    return dct_matrix(h) @ x @ dct_matrix(w).T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    h, w = c.shape
    return dct_matrix(h).T @ c @ dct_matrix(w)


# ---------------------------------------------------------------------
# frequency embedding


def freq_embed_graph(pixels: T.Tensor, channels: int) -> T.Tensor:
    """Differentiable pipeline from an (H, W, C) pixel tensor to the
    768-dim log-DCT embedding.

    grayscale -> bilinear resize to 320x320 -> orthonormal DCT ->
    log(|c| + eps) -> per-image standardisation -> 24x32 area pooling ->
    flatten.
    """
    h, w = pixels.shape[0], pixels.shape[1]
    if channels == 3:
        gray = (pixels * LUMA_WEIGHTS).sum(axis=2)
    else:
        gray = pixels.reshape((h, w))
    resized = T.sandwich(gray, resize_matrix(h, FREQ_SIZE), resize_matrix(w, FREQ_SIZE))
    coeffs = T.sandwich(resized, dct_matrix(FREQ_SIZE), dct_matrix(FREQ_SIZE))
    logmag = T.log_abs(coeffs, LOG_EPS)
    size = FREQ_SIZE * FREQ_SIZE
    mean = logmag.sum() / size
    centered = logmag - mean
    std = ((centered * centered).sum() / size).sqrt()
    normed = centered / (std + LOG_EPS)
    pooled = T.sandwich(
        normed, pool_matrix(FREQ_SIZE, POOL_ROWS), pool_matrix(FREQ_SIZE, POOL_COLS)
    )
    return pooled.reshape(EMBED_DIM)


def freq_embed(img: ImageBuffer) -> np.ndarray:
    """768-dim frequency embedding of an image (no gradient tracking)."""
    return freq_embed_graph(T.tensor(img.pixels), img.channels).data.copy()


# ---------------------------------------------------------------------
# EMB1 container


@dataclass
class EmbeddingRecord:
    """Per-image training unit: label plus one 768-dim vector per modality."""

    id: str
    label: int
    visual: np.ndarray  # (768,) float32
    text: np.ndarray
    freq: np.ndarray

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"record {self.id!r}: label must be 0 or 1, got {self.label}")
        for name in ("visual", "text", "freq"):
            v = np.asarray(getattr(self, name), dtype=np.float32)
            if v.shape != (EMBED_DIM,):
                raise ContractError(
                    f"record {self.id!r}: {name} vector must have length {EMBED_DIM}, "
                    f"got shape {v.shape}"
                )
            setattr(self, name, v)


@dataclass
class EmbeddingDataset:
    records: list[EmbeddingRecord] = field(default_factory=list)
    d: int = EMBED_DIM

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1


def write_emb1(dataset: EmbeddingDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<III", EMB1_VERSION, len(dataset.records), EMBED_DIM))
        for rec in dataset.records:
            ident = rec.id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<B", rec.label))
            fh.write(rec.visual.astype("<f4").tobytes())
            fh.write(rec.text.astype("<f4").tobytes())
            fh.write(rec.freq.astype("<f4").tobytes())


def read_emb1(path) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != EMB1_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EMB1_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    version, count, dim = struct.unpack_from("<III", raw, 4)
    if version != EMB1_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim != EMBED_DIM:
        raise FormatError(f"{path}: dim {dim} != {EMBED_DIM}")
    pos = 16
    records = []
    vec_bytes = dim * 4
    for i in range(count):
        try:
            (id_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            ident = raw[pos : pos + id_len].decode("utf-8")
            pos += id_len
            label = raw[pos]
            pos += 1
            vectors = []
            for _ in range(3):
                chunk = raw[pos : pos + vec_bytes]
                if len(chunk) != vec_bytes:
                    raise struct.error("short vector")
                vectors.append(np.frombuffer(chunk, dtype="<f4").copy())
                pos += vec_bytes
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: truncated or corrupt record {i}: {exc}") from exc
        if label not in (0, 1):
            raise FormatError(f"{path}: record {i} has label {label}, expected 0 or 1")
        records.append(EmbeddingRecord(ident, int(label), *vectors))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after record {count - 1}")
    return EmbeddingDataset(records)
