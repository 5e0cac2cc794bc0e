import numpy as np
import pytest

from fedpeft.config import ExperimentConfig, apply_overrides
from fedpeft.data import SyntheticTask, generate
from fedpeft.lora import LoraAdapter
from fedpeft.model import MiniTransformer, ModelConfig


def numeric_gradient(fn, arrays, index, step=1e-5):
    """Central finite differences of scalar ``fn(arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    for pos in np.ndindex(target.shape):
        original = target[pos]
        target[pos] = original + step
        plus = fn(base)
        target[pos] = original - step
        minus = fn(base)
        target[pos] = original
        grad[pos] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def model_config():
    return ModelConfig()


@pytest.fixture
def model(model_config):
    return MiniTransformer.from_seed(model_config, 0)


@pytest.fixture
def adapter(model_config):
    return LoraAdapter.initialize(model_config, np.random.default_rng(1))


@pytest.fixture
def busy_adapter(adapter):
    """Adapter with non-zero B so every trainable gradient is non-trivial."""
    rng = np.random.default_rng(2)
    return LoraAdapter(adapter.a, rng.normal(0.0, 0.1, size=adapter.b.shape), adapter.head)


@pytest.fixture
def task():
    return SyntheticTask()


@pytest.fixture
def dataset(task):
    return generate(task, 60, seed=3)


@pytest.fixture
def fast_config():
    """A few-second experiment: 4 clients, 2 per round, 2 rounds."""
    return apply_overrides(
        ExperimentConfig(),
        {
            "experiment.rounds": 2,
            "data.train_samples": 64,
            "data.val_samples": 24,
            "federation.n_clients": 4,
            "federation.clients_per_round": 2,
            "training.learning_rate": 0.1,
        },
    )


@pytest.fixture
def temp_checkpoint_dir(tmp_path):
    d = tmp_path / "checkpoints"
    d.mkdir()
    return d


@pytest.fixture
def temp_run_dir(tmp_path):
    return tmp_path / "run"
