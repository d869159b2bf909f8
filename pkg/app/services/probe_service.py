"""Few-shot linear probe: closed-form ridge regression onto one-hot classes."""

import logging
from typing import List, Optional, Tuple

import numpy as np

from ..config import config
from ..core.checkpoint import Checkpoint
from ..core.errors import ContractError, DimensionError
from ..core.rng import RngState
from ..core.tensor import Tensor, no_grad
from ..core.transformer import forward
from .task_service import SyntheticTask


def ridge_fit(features: np.ndarray, targets: np.ndarray, l2: float) -> Tuple[np.ndarray, np.ndarray]:
    """Solve (XᵀX + l2·I) W = XᵀY with an unregularized bias column.

    Returns ``(W, b)``.
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    augmented = np.column_stack([np.ones(X.shape[0]), X])
    penalty = l2 * np.eye(augmented.shape[1])
    penalty[0, 0] = 0.0
    beta = np.linalg.solve(augmented.T @ augmented + penalty, augmented.T @ Y)
    return beta[1:], beta[0]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    encoded = np.zeros((labels.size, num_classes))
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


def probe_accuracy(weights: np.ndarray, bias: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    predictions = (np.asarray(features, dtype=np.float64) @ weights + bias).argmax(axis=1)
    return float((predictions == labels).mean())


class ProbeService:
    """Ridge probe over frozen pooled representations, averaged over random splits."""

    def __init__(self, config_obj=config):
        self.config = config_obj
        self.logger = logging.getLogger(self.__class__.__name__)

    def splits(self, num_examples: int, seeds: int, train_fraction: float = 0.5) -> List[Tuple[np.ndarray, np.ndarray]]:
        cut = int(round(num_examples * train_fraction))
        result = []
        for seed in range(seeds):
            order = RngState(seed=seed).generator("probe_split").permutation(num_examples)
            result.append((order[:cut], order[cut:]))
        return result

    def linear_probe_eval(
        self,
        reps: np.ndarray,
        labels: np.ndarray,
        l2: Optional[float] = None,
        seeds: Optional[int] = None,
        train_fraction: float = 0.5,
    ) -> float:
        """Mean held-out accuracy over ``seeds`` random train/test splits."""
        l2 = self.config.PROBE_L2 if l2 is None else l2
        seeds = self.config.PROBE_SEEDS if seeds is None else seeds
        reps = np.asarray(reps, dtype=np.float64)
        if reps.ndim != 2 or reps.shape[0] != np.asarray(labels).size:
            raise DimensionError(f"reps {reps.shape} do not match {np.asarray(labels).size} labels")
        if l2 <= 0:
            raise ContractError(f"l2 must be > 0, got {l2}")
        classes, encoded = np.unique(np.asarray(labels), return_inverse=True)
        train_size = int(round(reps.shape[0] * train_fraction))
        if train_size < classes.size:
            raise ContractError(f"{train_size} training examples cannot cover {classes.size} classes")

        accuracies = []
        for train, test in self.splits(reps.shape[0], seeds, train_fraction):
            weights, bias = ridge_fit(reps[train], one_hot(encoded[train], classes.size), l2)
            accuracies.append(probe_accuracy(weights, bias, reps[test], encoded[test]))
        accuracy = float(np.mean(accuracies))
        self.logger.debug(f"Probe accuracy {accuracy:.4f} over {seeds} splits (l2={l2})")
        return accuracy

    def representations(self, ckpt: Checkpoint, task: SyntheticTask, sequences: int = 256) -> Tuple[np.ndarray, np.ndarray]:
        """Pooled final-layer representations and cluster labels of the probe set."""
        batch = task.probe_set(sequences)
        params = {name: Tensor(value, name=name) for name, value in ckpt.params.items()}
        with no_grad():
            out = forward(ckpt.config, params, batch.tokens)
        return out.pooled.data.astype(np.float64), batch.clusters

    def probe_checkpoint(self, ckpt: Checkpoint, task: SyntheticTask, l2: Optional[float] = None, sequences: int = 256) -> float:
        reps, labels = self.representations(ckpt, task, sequences)
        return self.linear_probe_eval(reps, labels, l2)
