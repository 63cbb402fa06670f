"""White-box FGSM and PGD attacks against the capsule detector.

Two attack surfaces are supported: the embedding vectors themselves
(all enabled modalities at once), and raw pixels routed through the
differentiable frequency pipeline while the visual/text embeddings stay
fixed. Both enforce the L-infinity contract exactly: every output stays
within the configured ball around the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, ContractError
from .features import EmbeddingDataset, EmbeddingRecord, ImageBuffer, freq_embed_graph

TARGET_SPACES = ("embedding", "image-frequency")


@dataclass
class AttackConfig:
    magnitude: float = 0.005   # FGSM step
    bound: float = 0.005       # PGD L-infinity radius
    step_size: float = 0.008   # PGD per-iteration step
    iterations: int = 10
    target_space: str = "embedding"

    def __post_init__(self):
        if min(self.magnitude, self.bound, self.step_size) < 0:
            raise ContractError("attack magnitudes must be non-negative")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.target_space not in TARGET_SPACES:
            raise ConfigError(f"target_space must be one of {TARGET_SPACES}")


@dataclass
class AttackResult:
    record: EmbeddingRecord | None = None
    image: ImageBuffer | None = None
    zero_gradient: bool = False


def _embedding_grads(
    vectors: dict[str, np.ndarray],
    label: int,
    model: M.CapsModel,
    loss_cfg: M.MarginLossConfig,
) -> dict[str, np.ndarray]:
    leaves = {name: T.tensor(vec, requires_grad=True) for name, vec in vectors.items()}
    caps = M.encode_from_inputs(leaves, model)
    class_caps, _ = M.route(caps, model)
    loss = M.margin_loss(class_caps, M.one_hot(label, model.config.num_classes), loss_cfg)
    T.backward(loss)
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }


def _record_vectors(record: EmbeddingRecord) -> dict[str, np.ndarray]:
    return {
        "visual": np.asarray(record.visual, dtype=np.float64),
        "text": np.asarray(record.text, dtype=np.float64),
        "frequency": np.asarray(record.freq, dtype=np.float64),
    }


def _to_f32_in_ball(adv: np.ndarray, base: np.ndarray, bound: float) -> np.ndarray:
    """Cast to float32 without leaving the L-infinity ball around base.

    base comes from a float32 record so it is exactly representable; the
    cast of adv can overshoot the ball by at most half an ulp, which one
    nextafter step per side repairs.
    """
    out = adv.astype(np.float32)
    for _ in range(2):
        over = out.astype(np.float64) > base + bound
        under = out.astype(np.float64) < base - bound
        if not (over.any() or under.any()):
            break
        out[over] = np.nextafter(out[over], np.float32(-np.inf))
        out[under] = np.nextafter(out[under], np.float32(np.inf))
    return out


def _rebuild(
    record: EmbeddingRecord, vectors: dict[str, np.ndarray],
    base: dict[str, np.ndarray], bound: float,
) -> EmbeddingRecord:
    return EmbeddingRecord(
        record.id,
        record.label,
        _to_f32_in_ball(vectors["visual"], base["visual"], bound),
        _to_f32_in_ball(vectors["text"], base["text"], bound),
        _to_f32_in_ball(vectors["frequency"], base["frequency"], bound),
    )


def fgsm_record(
    record: EmbeddingRecord,
    model: M.CapsModel,
    magnitude: float,
    loss_cfg: M.MarginLossConfig | None = None,
) -> AttackResult:
    """Single sign-gradient step of the given magnitude on the embeddings."""
    loss_cfg = loss_cfg or M.MarginLossConfig()
    base = _record_vectors(record)
    grads = _embedding_grads(base, record.label, model, loss_cfg)
    zero = all(not np.any(g) for g in grads.values())
    adv = {name: base[name] + magnitude * np.sign(grads[name]) for name in base}
    return AttackResult(record=_rebuild(record, adv, base, magnitude), zero_gradient=zero)


def pgd_record(
    record: EmbeddingRecord,
    model: M.CapsModel,
    cfg: AttackConfig,
    loss_cfg: M.MarginLossConfig | None = None,
) -> AttackResult:
    """Iterated sign-gradient steps projected into the L-infinity ball."""
    loss_cfg = loss_cfg or M.MarginLossConfig()
    base = _record_vectors(record)
    current = {name: v.copy() for name, v in base.items()}
    zero = True
    for _ in range(cfg.iterations):
        grads = _embedding_grads(current, record.label, model, loss_cfg)
        if any(np.any(g) for g in grads.values()):
            zero = False
        for name in current:
            stepped = current[name] + cfg.step_size * np.sign(grads[name])
            current[name] = np.clip(stepped, base[name] - cfg.bound, base[name] + cfg.bound)
    return AttackResult(record=_rebuild(record, current, base, cfg.bound), zero_gradient=zero)


# ---------------------------------------------------------------------
# pixel-space attacks through the frequency pipeline


def _image_grad(
    pixels: np.ndarray,
    channels: int,
    record: EmbeddingRecord,
    model: M.CapsModel,
    loss_cfg: M.MarginLossConfig,
) -> np.ndarray:
    leaf = T.tensor(pixels, requires_grad=True)
    inputs = {
        "visual": T.tensor(np.asarray(record.visual, dtype=np.float64)),
        "text": T.tensor(np.asarray(record.text, dtype=np.float64)),
        "frequency": freq_embed_graph(leaf, channels),
    }
    caps = M.encode_from_inputs(inputs, model)
    class_caps, _ = M.route(caps, model)
    loss = M.margin_loss(class_caps, M.one_hot(record.label, model.config.num_classes), loss_cfg)
    T.backward(loss)
    return leaf.grad if leaf.grad is not None else np.zeros_like(pixels)


def fgsm_image(
    img: ImageBuffer,
    record: EmbeddingRecord,
    model: M.CapsModel,
    magnitude: float,
    loss_cfg: M.MarginLossConfig | None = None,
) -> AttackResult:
    loss_cfg = loss_cfg or M.MarginLossConfig()
    grad = _image_grad(img.pixels, img.channels, record, model, loss_cfg)
    adv = np.clip(img.pixels + magnitude * np.sign(grad), 0.0, 1.0)
    return AttackResult(
        image=ImageBuffer(img.height, img.width, img.channels, adv),
        zero_gradient=not np.any(grad),
    )


def pgd_image(
    img: ImageBuffer,
    record: EmbeddingRecord,
    model: M.CapsModel,
    cfg: AttackConfig,
    loss_cfg: M.MarginLossConfig | None = None,
) -> AttackResult:
    loss_cfg = loss_cfg or M.MarginLossConfig()
    base = img.pixels
    current = base.copy()
    zero = True
    for _ in range(cfg.iterations):
        grad = _image_grad(current, img.channels, record, model, loss_cfg)
        if np.any(grad):
            zero = False
        current = current + cfg.step_size * np.sign(grad)
        current = np.clip(current, base - cfg.bound, base + cfg.bound)
        current = np.clip(current, 0.0, 1.0)
    return AttackResult(
        image=ImageBuffer(img.height, img.width, img.channels, current), zero_gradient=zero
    )


def attack_dataset(
    dataset: EmbeddingDataset,
    model: M.CapsModel,
    method: str,
    cfg: AttackConfig,
    loss_cfg: M.MarginLossConfig | None = None,
) -> EmbeddingDataset:
    """Apply an embedding-space attack to every record."""
    if method == "fgsm":
        records = [fgsm_record(r, model, cfg.magnitude, loss_cfg).record for r in dataset]
    elif method == "pgd":
        records = [pgd_record(r, model, cfg, loss_cfg).record for r in dataset]
    else:
        raise ConfigError(f"unknown attack method {method!r}, expected fgsm or pgd")
    return EmbeddingDataset(records)
