"""Seeded synthetic two-cluster embedding generator shared by the
training, robustness, and acceptance tests.

Both classes share a fixed dense baseline direction (component scale up
to BASE_SCALE) so the capsule norms start in the responsive range; the
fake class is offset by 2*SIGMA on every component, i.e. the cluster
means are separated by two noise standard deviations per component. The
per-component gap (0.004) sits inside the default adversarial budget
(0.005), so bounded attacks can carry fakes across the boundary.
"""

import numpy as np

from capsdet.features import EmbeddingDataset, EmbeddingRecord

SIGMA = 0.002
BASE_SCALE = 0.05
_BASE_SEED = 12345


def _baseline() -> np.ndarray:
    direction = np.random.default_rng(_BASE_SEED).normal(0.0, 1.0, 768)
    return BASE_SCALE * direction / np.abs(direction).max()


def make_synth(n: int, seed: int) -> EmbeddingDataset:
    rng = np.random.default_rng(seed)
    base = _baseline()
    records = []
    for i in range(n):
        label = int(rng.integers(0, 2))
        mean = base + (2.0 * SIGMA if label == 1 else 0.0)
        vectors = [
            (rng.normal(0.0, SIGMA, 768) + mean).astype(np.float32) for _ in range(3)
        ]
        records.append(EmbeddingRecord(f"s{i}", label, *vectors))
    return EmbeddingDataset(records)
