import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthdata import make_synth  # noqa: E402

from capsdet import ModelConfig, TrainConfig, train  # noqa: E402


@pytest.fixture(scope="session")
def synth_train():
    return make_synth(600, 1)


@pytest.fixture(scope="session")
def synth_val():
    return make_synth(200, 2)


@pytest.fixture(scope="session")
def synth_test():
    return make_synth(200, 3)


@pytest.fixture(scope="session")
def trained(synth_train, synth_val):
    """Model trained on the synthetic clusters, plus wall-clock seconds."""
    start = time.time()
    model, history = train(synth_train, synth_val, ModelConfig(), TrainConfig(seed=7))
    return model, history, time.time() - start


@pytest.fixture
def rng():
    return np.random.default_rng(0)
