import numpy as np
import pytest

from app.core.errors import ContractError, DimensionError
from app.services.probe_service import ProbeService, one_hot, probe_accuracy, ridge_fit
from app.services.task_service import SyntheticTask


@pytest.fixture
def probe():
    return ProbeService()


def _blobs(count=40, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    reps = rng.normal(scale=0.5, size=(count, 3)) + np.where(labels[:, None] == 1, 5.0, -5.0)
    return reps, labels


def test_separable_blobs_are_classified_perfectly(probe):
    reps, labels = _blobs()
    assert probe.linear_probe_eval(reps, labels, l2=1e-6, seeds=5) == 1.0


def test_random_labels_give_chance(probe):
    rng = np.random.default_rng(1)
    reps = rng.normal(size=(2000, 5))
    labels = rng.integers(0, 2, size=2000)
    assert probe.linear_probe_eval(reps, labels, l2=1024.0, seeds=5) == pytest.approx(0.5, abs=0.05)


def test_closed_form_matches_gradient_descent():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 4))
    labels = rng.integers(0, 3, size=60)
    Y = one_hot(labels, 3)
    W, b = ridge_fit(X, Y, 1024.0)

    A = np.column_stack([np.ones(60), X])
    penalty = 1024.0 * np.eye(5)
    penalty[0, 0] = 0.0
    hessian = A.T @ A + penalty
    step = 1.0 / np.linalg.eigvalsh(hessian).max()
    beta = np.zeros((5, 3))
    for _ in range(20000):
        beta -= step * (hessian @ beta - A.T @ Y)
    np.testing.assert_allclose(W, beta[1:], atol=1e-6)
    np.testing.assert_allclose(b, beta[0], atol=1e-6)
    assert probe_accuracy(W, b, X, labels) == pytest.approx(probe_accuracy(beta[1:], beta[0], X, labels), abs=1e-3)


def test_splits_are_seeded_halves(probe):
    first = probe.splits(10, 2)
    assert first[0][0].size == 5 and first[0][1].size == 5
    assert np.array_equal(np.sort(np.concatenate(first[0])), np.arange(10))
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(first, probe.splits(10, 2)))


def test_probe_argument_checks(probe):
    reps, labels = _blobs()
    with pytest.raises(ContractError):
        probe.linear_probe_eval(reps, labels, l2=0.0)
    with pytest.raises(DimensionError):
        probe.linear_probe_eval(reps[:-1], labels)
    with pytest.raises(ContractError):
        probe.linear_probe_eval(reps[:2], labels[:2], l2=1.0)


def test_checkpoint_representations(probe, dense_ckpt, task_config):
    task = SyntheticTask(task_config)
    reps, labels = probe.representations(dense_ckpt, task, sequences=16)
    assert reps.shape == (16, dense_ckpt.config.d_model)
    assert labels.shape == (16,)
    accuracy = probe.probe_checkpoint(dense_ckpt, task, l2=1024.0, sequences=16)
    assert 0.0 <= accuracy <= 1.0
