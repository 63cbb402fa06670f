"""Interpretability outputs: pixel saliency through the frequency
branch, coupling-coefficient histograms, and capsule-vector exports for
external projection tooling."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ContractError
from .features import EmbeddingDataset, EmbeddingRecord, ImageBuffer, freq_embed_graph

MODALITY_OF_ROW = ("visual", "text", "frequency")


@dataclass
class SaliencyMap:
    """Channel-averaged absolute pixel gradient of the winning
    class-capsule norm. Only the frequency branch is differentiable with
    respect to pixels, so this is frequency-path saliency; the stored
    visual/text embeddings are treated as constants."""

    values: np.ndarray  # (H, W), non-negative
    source_id: str
    predicted_label: int
    confidence: float
    zero_gradient: bool = False

    def normalized(self) -> np.ndarray:
        lo, hi = float(self.values.min()), float(self.values.max())
        if hi <= lo:
            return np.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)


def saliency(img: ImageBuffer, record: EmbeddingRecord, model: M.CapsModel) -> SaliencyMap:
    """Gradient of the prediction confidence with respect to the pixels."""
    leaf = T.tensor(img.pixels, requires_grad=True)
    inputs = {
        "visual": T.tensor(np.asarray(record.visual, dtype=np.float64)),
        "text": T.tensor(np.asarray(record.text, dtype=np.float64)),
        "frequency": freq_embed_graph(leaf, img.channels),
    }
    caps = M.encode_from_inputs(inputs, model)
    class_caps, _ = M.route(caps, model)
    label, confidence = M.classify(class_caps)
    norms = T.row_norms(class_caps)
    p = T.max_reduce(norms)
    T.backward(p)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(img.pixels)
    values = np.abs(grad).mean(axis=2)
    return SaliencyMap(
        values=values,
        source_id=record.id,
        predicted_label=label,
        confidence=confidence,
        zero_gradient=not np.any(grad),
    )


def save_saliency_pgm(smap: SaliencyMap, path) -> None:
    """8-bit PGM heatmap of the min-max normalized map."""
    from .features import save_ppm

    normed = smap.normalized()
    save_ppm(ImageBuffer.from_array(normed[:, :, None]), path)


def save_saliency_raw(smap: SaliencyMap, path) -> None:
    """Raw map: u32 height, u32 width, then H*W little-endian float32."""
    import struct

    h, w = smap.values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(smap.values.astype("<f4").tobytes())


# ---------------------------------------------------------------------
# coupling coefficients


def final_couplings(record: EmbeddingRecord, model: M.CapsModel) -> tuple[np.ndarray, int]:
    """Final-iteration coupling column for the predicted class
    (one coefficient per low-level capsule)."""
    class_caps, trace = M.forward(record, model)
    pred, _ = M.classify(class_caps)
    return trace.couplings[-1][:, pred], pred


def routing_histogram(
    dataset: EmbeddingDataset, model: M.CapsModel, bins: int = 20
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Histogram the predicted-class coupling coefficients per source
    modality over the whole dataset. Returns modality -> (counts, edges)
    with edges shared across modalities."""
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    n = model.config.caps_per_modality
    per_modality: dict[str, list[np.ndarray]] = {m: [] for m in MODALITY_OF_ROW}
    for rec in dataset:
        coeffs, _ = final_couplings(rec, model)
        for j, modality in enumerate(MODALITY_OF_ROW):
            per_modality[modality].append(coeffs[j * n : (j + 1) * n])
    stacked = {m: (np.concatenate(v) if v else np.zeros(0)) for m, v in per_modality.items()}
    everything = np.concatenate(list(stacked.values()))
    if everything.size:
        lo, hi = float(everything.min()), float(everything.max())
        if hi <= lo:
            hi = lo + 1e-12
    else:
        lo, hi = 0.0, 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return {m: (np.histogram(v, bins=edges)[0], edges) for m, v in stacked.items()}


def histogram_csv(hists: dict[str, tuple[np.ndarray, np.ndarray]]) -> str:
    buf = io.StringIO()
    buf.write("modality,bin_lo,bin_hi,count\n")
    for modality, (counts, edges) in hists.items():
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            buf.write(f"{modality},{lo:.6f},{hi:.6f},{int(c)}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------
# capsule export


def export_capsules(dataset: EmbeddingDataset, model: M.CapsModel) -> str:
    """CSV export of the routing votes (iteration -1; they are constant
    across iterations) and per-iteration class capsules. Values carry
    enough digits for an exact float32 round trip."""
    d_k = model.config.class_caps_dim
    header = "record_id,iteration,capsule,class," + ",".join(
        f"c{j}" for j in range(d_k)
    )
    lines = [header]
    for rec in dataset:
        _, trace = M.forward(rec, model)
        votes = trace.votes.astype(np.float32)
        for i in range(votes.shape[0]):
            for k in range(votes.shape[1]):
                vals = ",".join(f"{x:.8e}" for x in votes[i, k])
                lines.append(f"{rec.id},-1,{i},{k},{vals}")
        for r, caps in enumerate(trace.class_caps):
            for k in range(caps.shape[0]):
                vals = ",".join(f"{x:.8e}" for x in caps[k].astype(np.float32))
                lines.append(f"{rec.id},{r},-1,{k},{vals}")
    return "\n".join(lines) + "\n"


def parse_capsule_export(text: str):
    """Inverse of export_capsules; returns rows of
    (record_id, iteration, capsule, class, float32 vector)."""
    rows = []
    lines = text.strip().split("\n")
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(
            (
                parts[0],
                int(parts[1]),
                int(parts[2]),
                int(parts[3]),
                np.array([np.float32(x) for x in parts[4:]]),
            )
        )
    return rows
