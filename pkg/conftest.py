"""Shared fixtures: small synthetic datasets and IDX fixture directories."""

import gzip
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.fedbench.fedproto import run_experiment
from src.fedbench.mnist import IdxTensor, LabeledDataset, serialize_idx
from src.fedbench.models import ArchitectureKind, ExperimentConfig
from src.fedbench.nn import Hyperparams

SMALL_DIMS = (20, 16, 10)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end runs on the real MNIST files")


def make_dataset(n: int, seed: int, n_features: int = SMALL_DIMS[0], n_classes: int = 10) -> LabeledDataset:
    """Learnable synthetic data: one Gaussian blob per class, labels balanced."""
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(1234).uniform(0.0, 1.0, size=(n_classes, n_features))
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    images = centers[labels] + rng.normal(0.0, 0.1, size=(n, n_features))
    return LabeledDataset(images=np.clip(images, 0.0, 1.0).astype(np.float32), labels=labels.astype(np.int64))


def small_config(arch="dfl", n=3, rounds=2, **kwargs) -> ExperimentConfig:
    hyper = Hyperparams(
        learning_rate=kwargs.pop("learning_rate", 0.1),
        batch_size=kwargs.pop("batch_size", 16),
        epochs_per_round=kwargs.pop("epochs_per_round", 1),
    )
    return ExperimentConfig(
        arch=ArchitectureKind(arch),
        n_participants=n,
        rounds=rounds,
        master_seed=kwargs.pop("master_seed", 7),
        hyper=hyper,
        layer_dims=kwargs.pop("layer_dims", SMALL_DIMS),
        **kwargs,
    )


def write_mnist_fixture(directory: Path, n_train: int = 60, n_test: int = 20, seed: int = 0, gz: bool = False) -> Path:
    """Write four small MNIST-shaped IDX files (28x28 images) into ``directory``."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        # Brighten one row per class so the data is learnable
        for i, label in enumerate(labels):
            images[i, 2 * label + 4, :] = 255
        files = {
            f"{prefix}-images-idx3-ubyte": serialize_idx(IdxTensor(0x08, (n, 28, 28), images.tobytes())),
            f"{prefix}-labels-idx1-ubyte": serialize_idx(IdxTensor(0x08, (n,), labels.tobytes())),
        }
        for name, raw in files.items():
            if gz:
                (directory / f"{name}.gz").write_bytes(gzip.compress(raw))
            else:
                (directory / name).write_bytes(raw)
    return directory


@pytest.fixture
def train_set() -> LabeledDataset:
    return make_dataset(300, seed=1)


@pytest.fixture
def test_set() -> LabeledDataset:
    return make_dataset(100, seed=2)


@pytest.fixture
def tiny_record(train_set, test_set):
    return run_experiment(small_config("dfl", n=3, rounds=2), (train_set, test_set))


@pytest.fixture
def mnist_dir(tmp_path) -> Path:
    return write_mnist_fixture(tmp_path / "mnist")
