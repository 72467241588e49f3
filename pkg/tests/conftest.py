# tests/conftest.py
"""
Module: conftest.py

Shared pytest fixtures: a tiny shifted-shapes dataset (16×16 images, three
classes), a matching small architecture, a short training configuration and
the dataset written to disk for command-line tests.

Dataset fixtures are session-scoped: generation is deterministic and the
tests never mutate the examples.
"""

import numpy as np
import pytest

from app.datagen import DatasetSpec, DomainDataset, DomainShift, save_dataset
from app.network import ArchSpec, init
from app.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_spec():
    """Three classes, 16×16 pixels, moderate shift."""
    return DatasetSpec(
        n_source=30,
        n_target=30,
        n_classes=3,
        image_size=16,
        domain_shift=DomainShift.from_strength(0.5),
        seed=3,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return DomainDataset.from_spec(tiny_spec)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, tiny_dataset):
    """The tiny dataset written as four IDX files plus meta.txt."""
    out = tmp_path_factory.mktemp("data")
    save_dataset(tiny_dataset, out)
    return out


@pytest.fixture
def tiny_arch():
    return ArchSpec(image_size=16, conv_channels=[4, 8], feature_dim=12, n_classes=3)


@pytest.fixture
def tiny_net(tiny_arch):
    return init(0, tiny_arch)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=2, batch_size_source=10, batch_size_target=10, learning_rate=0.05, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
