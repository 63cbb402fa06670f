"""The multimodal capsule detector.

Three bias-free linear encoders lift the 768-dim modality embeddings
into 64 capsules of dimension 8 each; the stacked 192 low-level capsules
vote for K=2 class capsules ("real", "fake") through per-pair transform
matrices, and dynamic routing refines the coupling coefficients over R
iterations. Class membership is read off the class-capsule norms and
trained with a squared hinge margin loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError
from .features import EMBED_DIM, EmbeddingRecord

MODALITIES = ("visual", "text", "frequency")


@dataclass
class ModelConfig:
    d: int = EMBED_DIM          # modality embedding dimension
    caps_per_modality: int = 64
    caps_dim: int = 8           # low-level capsule dimension
    num_classes: int = 2
    class_caps_dim: int = 64
    routing_iters: int = 3
    modality_mask: tuple[str, ...] = MODALITIES
    route_grad_through_couplings: bool = True

    def __post_init__(self):
        if self.routing_iters < 1:
            raise ContractError("routing_iters must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        mask = tuple(self.modality_mask)
        if not mask or any(m not in MODALITIES for m in mask):
            raise ContractError(
                f"modality_mask must be a non-empty subset of {MODALITIES}, got {mask}"
            )
        self.modality_mask = mask

    @property
    def total_caps(self) -> int:
        return 3 * self.caps_per_modality


@dataclass
class MarginLossConfig:
    pos_margin: float = 0.9   # required norm for the present class
    neg_margin: float = 0.1   # allowed norm for the absent class
    neg_weight: float = 0.5   # down-weights the absent-class term

    def __post_init__(self):
        if not (0.0 <= self.neg_margin < self.pos_margin <= 1.0):
            raise ContractError(
                f"margins must satisfy 0 <= neg < pos <= 1, got "
                f"neg={self.neg_margin}, pos={self.pos_margin}"
            )
        if self.neg_weight <= 0:
            raise ContractError("neg_weight must be positive")


class CapsModel:
    """Learnable parameters: one encoder per modality plus the routing
    transform tensor (total_caps, K, caps_dim, class_caps_dim)."""

    ENCODER_NAMES = ("enc_visual", "enc_text", "enc_frequency")

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "CapsModel":
        rng = np.random.default_rng(seed)
        n_flat = config.caps_per_modality * config.caps_dim

        def xavier(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return T.tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)

        params = {
            name: xavier((config.d, n_flat), config.d, n_flat)
            for name in cls.ENCODER_NAMES
        }
        params["route_transforms"] = xavier(
            (config.total_caps, config.num_classes, config.caps_dim, config.class_caps_dim),
            config.caps_dim,
            config.class_caps_dim,
        )
        return cls(config, params)

    def copy(self) -> "CapsModel":
        clone = {}
        for name, p in self.params.items():
            t = T.tensor(p.data.copy(), requires_grad=True)
            clone[name] = t
        return CapsModel(self.config, clone)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class RoutingTrace:
    """Per-iteration routing state, recorded as detached arrays."""

    logits: list[np.ndarray] = field(default_factory=list)      # (3N, K) at iteration start
    couplings: list[np.ndarray] = field(default_factory=list)   # (3N, K)
    class_caps: list[np.ndarray] = field(default_factory=list)  # (K, d_k)
    final_raw: np.ndarray | None = None                         # (K, d_k) pre-squash
    votes: np.ndarray | None = None                             # (3N, K, d_k)


def encode_capsules(record: EmbeddingRecord, model: CapsModel,
                    config: ModelConfig | None = None) -> T.Tensor:
    """Stack the per-modality capsules into a (3N, caps_dim) tensor.

    Masked-out modalities contribute all-zero rows so downstream shapes
    never change.
    """
    config = config or model.config
    inputs = {
        "visual": T.tensor(np.asarray(record.visual, dtype=np.float64)),
        "text": T.tensor(np.asarray(record.text, dtype=np.float64)),
        "frequency": T.tensor(np.asarray(record.freq, dtype=np.float64)),
    }
    return encode_from_inputs(inputs, model, config)


def encode_from_inputs(inputs: dict[str, T.Tensor], model: CapsModel,
                       config: ModelConfig | None = None) -> T.Tensor:
    """Like encode_capsules but takes live tensors, so attacks can
    differentiate with respect to the embeddings themselves."""
    config = config or model.config
    n, d_i = config.caps_per_modality, config.caps_dim
    blocks = []
    for modality, enc_name in zip(MODALITIES, CapsModel.ENCODER_NAMES):
        vec = inputs[modality]
        if vec.shape != (config.d,):
            raise ContractError(
                f"{modality} embedding must have shape ({config.d},), got {vec.shape}"
            )
        if modality in config.modality_mask:
            flat = T.matmul(vec.reshape((1, config.d)), model.params[enc_name])
            blocks.append(flat.reshape((n, d_i)))
        else:
            blocks.append(T.tensor(np.zeros((n, d_i))))
    return T.concat(blocks, axis=0)


def squash(vec: np.ndarray) -> np.ndarray:
    """Plain-array squash for callers outside the autodiff graph."""
    v = np.asarray(vec, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < T.NORM_GUARD:
        return np.zeros_like(v)
    return (n / (1.0 + n * n)) * v


def route(caps: T.Tensor, model: CapsModel,
          config: ModelConfig | None = None) -> tuple[T.Tensor, RoutingTrace]:
    """Dynamic routing from low-level capsules to the class capsules.

    The votes are computed once (they do not change across iterations);
    each iteration softmax-normalises the logits per input capsule,
    aggregates the weighted votes, squashes, and adds the vote/output
    agreement back onto the logits. Gradients flow through all unrolled
    iterations.
    """
    config = config or model.config
    if caps.shape != (config.total_caps, config.caps_dim):
        raise ContractError(
            f"capsule matrix must have shape ({config.total_caps}, {config.caps_dim}), "
            f"got {caps.shape}"
        )
    votes = T.caps_predict(caps, model.params["route_transforms"])
    trace = RoutingTrace(votes=votes.data.copy())

    logits = T.tensor(np.zeros((config.total_caps, config.num_classes)))
    class_caps = None
    raw = None
    for _ in range(config.routing_iters):
        trace.logits.append(logits.data.copy())
        couplings = T.softmax(logits, axis=1)
        if not config.route_grad_through_couplings:
            couplings = T.tensor(couplings.data)
        trace.couplings.append(couplings.data.copy())
        raw = T.weighted_votes(couplings, votes)
        class_caps = T.squash_rows(raw)
        trace.class_caps.append(class_caps.data.copy())
        logits = logits + T.agreement(votes, class_caps)
    trace.logits.append(logits.data.copy())  # post-update state, len == R + 1
    trace.final_raw = raw.data.copy()
    return class_caps, trace


def margin_loss(class_caps: T.Tensor, one_hot: np.ndarray,
                cfg: MarginLossConfig | None = None) -> T.Tensor:
    """Squared hinge loss over class-capsule norms."""
    cfg = cfg or MarginLossConfig()
    y = np.asarray(one_hot, dtype=np.float64)
    if y.shape != (class_caps.shape[0],) or not np.isin(y, (0.0, 1.0)).all() or y.sum() != 1.0:
        raise ContractError(f"expected a one-hot vector of length {class_caps.shape[0]}")
    norms = T.row_norms(class_caps)
    present = T.relu(cfg.pos_margin - norms)
    absent = T.relu(norms - cfg.neg_margin)
    terms = T.tensor(y) * present * present + cfg.neg_weight * T.tensor(1.0 - y) * absent * absent
    return terms.sum()


def classify(class_caps) -> tuple[int, float]:
    """Label = argmax class-capsule norm (tie goes to 0, "real");
    confidence = the winning norm."""
    data = class_caps.data if isinstance(class_caps, T.Tensor) else np.asarray(class_caps)
    if data.ndim != 2 or data.shape[0] != 2:
        raise ContractError(f"classify expects (2, d_k) capsules, got shape {data.shape}")
    norms = np.linalg.norm(data, axis=1)
    label = 1 if norms[1] > norms[0] else 0
    return label, float(norms[label])


def forward(record: EmbeddingRecord, model: CapsModel,
            config: ModelConfig | None = None) -> tuple[T.Tensor, RoutingTrace]:
    return route(encode_capsules(record, model, config), model, config)


def one_hot(label: int, num_classes: int = 2) -> np.ndarray:
    y = np.zeros(num_classes)
    y[label] = 1.0
    return y


# ---------------------------------------------------------------------
# checkpoint format


CKPT_MAGIC = b"CPS1"
CKPT_VERSION = 1


def save_checkpoint(model: CapsModel, path) -> None:
    import struct

    cfg = model.config
    mask_bits = sum(1 << i for i, m in enumerate(MODALITIES) if m in cfg.modality_mask)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(
            struct.pack(
                "<6IBB",
                cfg.d,
                cfg.caps_per_modality,
                cfg.caps_dim,
                cfg.num_classes,
                cfg.class_caps_dim,
                cfg.routing_iters,
                mask_bits,
                1 if cfg.route_grad_through_couplings else 0,
            )
        )
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = model.params[name].data
            ident = name.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> CapsModel:
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    d, n, d_i, k, d_k, iters, mask_bits, grad_flag = struct.unpack_from("<6IBB", raw, 8)
    mask = tuple(m for i, m in enumerate(MODALITIES) if mask_bits & (1 << i))
    config = ModelConfig(
        d=d,
        caps_per_modality=n,
        caps_dim=d_i,
        num_classes=k,
        class_caps_dim=d_k,
        routing_iters=iters,
        modality_mask=mask,
        route_grad_through_couplings=bool(grad_flag),
    )
    pos = 8 + struct.calcsize("<6IBB")
    (n_params,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params: dict[str, T.Tensor] = {}
    try:
        for _ in range(n_params):
            (id_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + id_len].decode("utf-8")
            pos += id_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            chunk = raw[pos : pos + 8 * count]
            if len(chunk) != 8 * count:
                raise struct.error("short tensor payload")
            params[name] = T.tensor(
                np.frombuffer(chunk, dtype="<f8").reshape(shape).copy(), requires_grad=True
            )
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt parameter block: {exc}") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return CapsModel(config, params)
