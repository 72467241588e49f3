# tests/e2e/test_acceptance.py

"""
Acceptance experiments on the default shifted-shapes dataset.

Each test trains real networks for the full epoch budget over three seeds,
so the module is marked ``slow`` and deselected by default. Run it with::

    pytest -m slow tests/e2e

Trainings fan out over all CPU cores; results do not depend on the worker count.
"""
import os

import pytest

from app.datagen import DatasetSpec, DomainDataset, DomainShift
from app.experiments import Method, weights_for_method
from app.trainer import TrainConfig, run_experiment

pytestmark = [pytest.mark.e2e, pytest.mark.slow]

JOBS = os.cpu_count() or 1


def _dataset(shift: float) -> DomainDataset:
    return DomainDataset.from_spec(DatasetSpec(domain_shift=DomainShift.from_strength(shift), seed=0))


def _accuracy(method: Method, dataset: DomainDataset):
    config = TrainConfig(weights=weights_for_method(method), record_wall_time=False)
    return run_experiment(config, dataset, n_seeds=3, jobs=JOBS, run_id=method.value)


@pytest.fixture(scope="module")
def shifted():
    return _dataset(0.6)


@pytest.fixture(scope="module")
def summaries(shifted):
    return {method: _accuracy(method, shifted) for method in (Method.SOURCE_ONLY, Method.ROT_ENTMIN, Method.FULL)}


def test_full_method_improves_on_source_only(summaries):
    """
    Adaptation must pay off on the shifted target.

    The full method beats source-only training by at least three points of
    mean target accuracy and does not fall behind rotation plus entropy
    minimization by more than half a point.
    """
    full = summaries[Method.FULL].mean_accuracy
    assert full >= summaries[Method.SOURCE_ONLY].mean_accuracy + 0.03
    assert full >= summaries[Method.ROT_ENTMIN].mean_accuracy - 0.005


def test_rotation_pretext_is_learnable(shifted):
    """The rotation head reaches at least 90% accuracy on rotated target images."""
    summary = _accuracy(Method.ROT, shifted)
    assert summary.metrics["pretext_accuracy"].mean >= 0.90


def test_unshifted_target_is_solved_by_source_training():
    """
    Without a domain shift, source training alone classifies the target domain.

    This separates model capacity from adaptation: if this fails, the other
    acceptance numbers say nothing about the adaptation losses.
    """
    summary = _accuracy(Method.SOURCE_ONLY, _dataset(0.0))
    assert summary.mean_accuracy >= 0.95
