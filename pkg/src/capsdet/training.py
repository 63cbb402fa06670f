"""AdamW training loop with validation-based early stopping, plus the
confusion-matrix metrics used for every evaluation in the package."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ContractError
from .features import EmbeddingDataset


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 30
    early_stop_patience: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "early_stop_patience",
                     "beta1", "beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.early_stop_patience > self.max_epochs:
            raise ContractError("early_stop_patience must not exceed max_epochs")


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, T.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.params.items():
            g = grads[name] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            # decay decoupled from the adaptive step
            p.data -= cfg.learning_rate * cfg.weight_decay * p.data
            p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class MetricsReport:
    """Confusion counts and derived percentages; positive class = fake."""

    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "MetricsReport":
        precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total = tp + fp + fn + tn
        accuracy = 100.0 * (tp + tn) / total if total else 0.0
        return cls(tp, fp, fn, tn, precision, recall, f1, accuracy)

    CSV_HEADER = "tp,fp,fn,tn,precision,recall,f1,accuracy"

    def to_csv(self) -> str:
        return (
            f"{self.CSV_HEADER}\n"
            f"{self.tp},{self.fp},{self.fn},{self.tn},"
            f"{self.precision:.6f},{self.recall:.6f},{self.f1:.6f},{self.accuracy:.6f}\n"
        )

    def describe(self) -> str:
        return (
            f"tp={self.tp} fp={self.fp} fn={self.fn} tn={self.tn}\n"
            f"precision {self.precision:.2f}%  recall {self.recall:.2f}%  "
            f"f1 {self.f1:.2f}%  accuracy {self.accuracy:.2f}%"
        )


def evaluate(dataset: EmbeddingDataset, model: M.CapsModel,
             config: M.ModelConfig | None = None) -> MetricsReport:
    """Classify every record; label 1 (fake) is the positive class."""
    tp = fp = fn = tn = 0
    for rec in dataset:
        caps, _ = M.forward(rec, model, config)
        pred, _ = M.classify(caps)
        if rec.label == 1:
            tp += pred == 1
            fn += pred == 0
        else:
            fp += pred == 1
            tn += pred == 0
    return MetricsReport.from_counts(tp, fp, fn, tn)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_accuracy: float


def history_csv(history: list[EpochStats]) -> str:
    buf = io.StringIO()
    buf.write("epoch,loss,val_acc\n")
    for h in history:
        buf.write(f"{h.epoch},{h.loss:.6f},{h.val_accuracy:.6f}\n")
    return buf.getvalue()


def _batch_grads(batch, model: M.CapsModel, loss_cfg: M.MarginLossConfig):
    """Mean margin loss over the batch plus accumulated parameter grads."""
    model.zero_grads()
    total = 0.0
    for rec in batch:
        caps, _ = M.forward(rec, model)
        loss = M.margin_loss(caps, M.one_hot(rec.label, model.config.num_classes), loss_cfg)
        T.backward(loss)
        total += float(loss.data)
    scale = 1.0 / len(batch)
    grads = {
        name: (p.grad * scale if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.params.items()
    }
    return total * scale, grads


def train(
    train_set: EmbeddingDataset,
    val_set: EmbeddingDataset,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: M.MarginLossConfig | None = None,
    log=None,
) -> tuple[M.CapsModel, list[EpochStats]]:
    """Mini-batch AdamW with per-epoch seeded shuffling.

    Keeps the best-validation-accuracy checkpoint and stops once
    validation accuracy has not improved for ``early_stop_patience``
    epochs. Deterministic given (seed, data, config).
    """
    if not len(train_set) or not len(val_set):
        raise ContractError("train and validation datasets must be non-empty")
    loss_cfg = loss_cfg or M.MarginLossConfig()
    model = M.CapsModel.init(model_cfg, seed=train_cfg.seed)
    optimizer = AdamW(model.params, train_cfg)
    shuffle_rng = np.random.default_rng(train_cfg.seed + 1)

    best_model = model.copy()
    best_acc = -1.0
    stale = 0
    history: list[EpochStats] = []
    records = list(train_set)
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(records))
        losses = []
        for start in range(0, len(records), train_cfg.batch_size):
            batch = [records[i] for i in order[start : start + train_cfg.batch_size]]
            loss, grads = _batch_grads(batch, model, loss_cfg)
            optimizer.step(grads)
            losses.append(loss)
        val_acc = evaluate(val_set, model).accuracy
        stats = EpochStats(epoch, float(np.mean(losses)), val_acc)
        history.append(stats)
        if log:
            log(f"epoch {epoch}: loss {stats.loss:.6f}, val acc {val_acc:.2f}%")
        if val_acc > best_acc:
            best_acc = val_acc
            best_model = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.early_stop_patience:
                break
    return best_model, history
