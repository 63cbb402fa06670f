"""Natural image perturbations and the per-level robustness sweep.

All transforms map [0, 1] images to [0, 1] images. Only the Gaussian
noise transform is stochastic (seeded); everything else is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import CapabilityError, ConfigError
from .features import EmbeddingDataset, EmbeddingRecord, ImageBuffer, dct_matrix, freq_embed
from .training import MetricsReport, evaluate

DEFAULT_LEVELS: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.01, 0.0125, 0.025, 0.05, 0.1),
    "gaussian_blur": (0.5, 1.0, 2.0, 3.0, 4.0),
    "jpeg": (10, 30, 50, 70, 90),
    "sharpen": (0.1, 0.5, 1.0, 1.5, 2.0),
    "barrel": (-0.1, -0.2, -0.3, -0.4, -0.5),
    "pincushion": (0.1, 0.2, 0.3, 0.4, 0.5),
    "color_jitter": (0.75, 1.25, 1.5, 2.0),
}


@dataclass
class PerturbGrid:
    kind: str
    levels: tuple[float, ...]

    @classmethod
    def default(cls, kind: str) -> "PerturbGrid":
        if kind not in DEFAULT_LEVELS:
            raise ConfigError(f"unknown perturbation kind {kind!r}")
        return cls(kind, DEFAULT_LEVELS[kind])


# JPEG Annex-K luminance quantization table
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def jpeg_quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the libjpeg quality rule."""
    q = int(quality)
    if not 1 <= q <= 100:
        raise ConfigError(f"jpeg quality must be in [1, 100], got {quality}")
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(i, i + arr.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    if sigma <= 0:
        return ImageBuffer.from_array(img.pixels.copy())
    kernel = _gaussian_kernel(sigma)
    out = _blur_axis(_blur_axis(img.pixels, kernel, 0), kernel, 1)
    return ImageBuffer.from_array(out)


def gaussian_noise(img: ImageBuffer, sigma: float, seed: int = 0) -> ImageBuffer:
    if sigma <= 0:
        return ImageBuffer.from_array(img.pixels.copy())
    rng = np.random.default_rng(seed)
    return ImageBuffer.from_array(img.pixels + rng.normal(0.0, sigma, img.pixels.shape))


def jpeg_compress(img: ImageBuffer, quality: int) -> ImageBuffer:
    """Block-DCT quantization round trip (entropy coding is lossless and
    therefore skipped)."""
    table = jpeg_quant_table(quality)
    d8 = dct_matrix(8)
    h, w = img.height, img.width
    ph, pw = (-h) % 8, (-w) % 8
    out = np.empty_like(img.pixels)
    for c in range(img.channels):
        plane = np.pad(img.pixels[:, :, c], ((0, ph), (0, pw)), mode="edge")
        plane = plane * 255.0 - 128.0
        hh, ww = plane.shape
        blocks = plane.reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        coeffs = np.einsum("ij,abjk,lk->abil", d8, blocks, d8)
        coeffs = np.round(coeffs / table) * table
        blocks = np.einsum("ji,abjk,kl->abil", d8, coeffs, d8)
        plane = blocks.transpose(0, 2, 1, 3).reshape(hh, ww)
        out[:, :, c] = (plane[:h, :w] + 128.0) / 255.0
    return ImageBuffer.from_array(out)


def sharpen(img: ImageBuffer, factor: float) -> ImageBuffer:
    """Unsharp mask with inner blur sigma = 1."""
    blurred = gaussian_blur(img, 1.0)
    return ImageBuffer.from_array(img.pixels + factor * (img.pixels - blurred.pixels))


def _bilinear_sample(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    return (
        plane[y0, x0] * (1 - wy) * (1 - wx)
        + plane[y0, x1] * (1 - wy) * wx
        + plane[y1, x0] * wy * (1 - wx)
        + plane[y1, x1] * wy * wx
    )


def radial_distort(img: ImageBuffer, kappa: float) -> ImageBuffer:
    """Barrel (kappa < 0) or pincushion (kappa > 0) distortion.

    Each output pixel samples the input at c + (x - c)(1 + kappa r^2)
    with r normalized so r == 1 at the image corners; out-of-range
    samples clamp to the edge.
    """
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    corner = np.sqrt(cy * cy + cx * cx)
    r2 = (dy * dy + dx * dx) / (corner * corner) if corner > 0 else np.zeros_like(dy)
    scale = 1.0 + kappa * r2
    ys = cy + dy * scale
    xs = cx + dx * scale
    out = np.stack(
        [_bilinear_sample(img.pixels[:, :, c], ys, xs) for c in range(img.channels)], axis=2
    )
    return ImageBuffer.from_array(out)


def color_jitter(img: ImageBuffer, factor: float) -> ImageBuffer:
    """Brightness scaling followed by contrast scaling, same factor."""
    bright = np.clip(factor * img.pixels, 0.0, 1.0)
    return ImageBuffer.from_array(factor * (bright - 0.5) + 0.5)


def perturb(img: ImageBuffer, kind: str, level: float, seed: int = 0) -> ImageBuffer:
    if kind == "gaussian_noise":
        return gaussian_noise(img, level, seed)
    if kind == "gaussian_blur":
        return gaussian_blur(img, level)
    if kind == "jpeg":
        return jpeg_compress(img, int(level))
    if kind == "sharpen":
        return sharpen(img, level)
    if kind == "barrel":
        if level >= 0:
            raise ConfigError(f"barrel distortion needs a negative coefficient, got {level}")
        return radial_distort(img, level)
    if kind == "pincushion":
        if level <= 0:
            raise ConfigError(f"pincushion distortion needs a positive coefficient, got {level}")
        return radial_distort(img, level)
    if kind == "color_jitter":
        return color_jitter(img, level)
    raise ConfigError(f"unknown perturbation kind {kind!r}")


# ---------------------------------------------------------------------
# sweep


@dataclass
class SweepRow:
    kind: str
    level: str  # formatted level or "average"
    metrics: MetricsReport


def sweep_csv(rows: list[SweepRow]) -> str:
    out = ["kind,level,precision,recall,f1,accuracy"]
    for r in rows:
        m = r.metrics
        out.append(
            f"{r.kind},{r.level},{m.precision:.6f},{m.recall:.6f},{m.f1:.6f},{m.accuracy:.6f}"
        )
    return "\n".join(out) + "\n"


def robustness_sweep(
    dataset: EmbeddingDataset,
    model: M.CapsModel,
    grids: list[PerturbGrid],
    images: dict[str, ImageBuffer] | None = None,
    perturbed_datasets: dict[tuple[str, float], EmbeddingDataset] | None = None,
    seed: int = 0,
) -> list[SweepRow]:
    """Evaluate the model per perturbation level and average each grid.

    Two modes: with ``perturbed_datasets`` (full pipeline, all three
    modalities re-extracted externally) the supplied datasets are scored
    directly; with ``images`` (frequency-only) each image is perturbed
    here and only the frequency embedding is recomputed. Records without
    an image keep their stored embeddings.
    """
    if perturbed_datasets is None and images is None:
        raise CapabilityError(
            "full-pipeline sweeps need re-extracted embeddings per level; "
            "frequency-only sweeps need the source images"
        )
    rows: list[SweepRow] = []
    for grid in grids:
        level_metrics = []
        for level in grid.levels:
            if perturbed_datasets is not None:
                key = (grid.kind, level)
                if key not in perturbed_datasets:
                    raise CapabilityError(
                        f"missing re-extracted embeddings for {grid.kind} level {level}"
                    )
                level_set = perturbed_datasets[key]
            else:
                level_set = _freq_only_dataset(dataset, images, grid.kind, level, seed)
            metrics = evaluate(level_set, model)
            level_metrics.append(metrics)
            rows.append(SweepRow(grid.kind, _fmt_level(level), metrics))
        # levels weighted uniformly in the per-kind summary
        avg = MetricsReport(
            tp=sum(m.tp for m in level_metrics),
            fp=sum(m.fp for m in level_metrics),
            fn=sum(m.fn for m in level_metrics),
            tn=sum(m.tn for m in level_metrics),
            precision=float(np.mean([m.precision for m in level_metrics])),
            recall=float(np.mean([m.recall for m in level_metrics])),
            f1=float(np.mean([m.f1 for m in level_metrics])),
            accuracy=float(np.mean([m.accuracy for m in level_metrics])),
        )
        rows.append(SweepRow(grid.kind, "average", avg))
    return rows


def _fmt_level(level: float) -> str:
    return f"{level:g}"


def _freq_only_dataset(
    dataset: EmbeddingDataset,
    images: dict[str, ImageBuffer],
    kind: str,
    level: float,
    seed: int,
) -> EmbeddingDataset:
    records = []
    for rec in dataset:
        if rec.id in images:
            new_freq = freq_embed(perturb(images[rec.id], kind, level, seed)).astype(np.float32)
            records.append(EmbeddingRecord(rec.id, rec.label, rec.visual, rec.text, new_freq))
        else:
            records.append(rec)
    return EmbeddingDataset(records)
