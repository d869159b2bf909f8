"""Synthetic masked-token pretraining task.

Each sequence is drawn from one of ``num_clusters`` first-order Markov chains
over the data vocabulary (every id except the mask sentinel, which is the
last id). A fraction of positions is replaced by the sentinel and the
original ids become the targets. Cluster labels are only used by the probe.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..core.errors import ConfigurationError, DimensionError
from ..core.rng import RngState
from ..models.training import TaskConfig


@dataclass
class Batch:
    tokens: np.ndarray
    positions: np.ndarray
    targets: np.ndarray
    clusters: np.ndarray
    clean: np.ndarray

    @property
    def num_targets(self) -> int:
        return int(self.targets.size)


class SyntheticTask:
    """Per-cluster Dirichlet Markov chains with a fixed held-out set."""

    def __init__(self, cfg: TaskConfig, transitions: Optional[np.ndarray] = None, initial: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.logger = logging.getLogger(self.__class__.__name__)
        self.data_vocab = cfg.vocab_size - 1
        self.mask_token = cfg.vocab_size - 1
        shape = (cfg.num_clusters, self.data_vocab, self.data_vocab)

        if transitions is not None:
            transitions = np.asarray(transitions, dtype=np.float64)
            if transitions.shape != shape:
                raise DimensionError(f"transitions must have shape {shape}, got {transitions.shape}")
        elif cfg.uniform:
            transitions = np.full(shape, 1.0 / self.data_vocab)
        else:
            rng = RngState(seed=cfg.seed)
            alpha = np.full(self.data_vocab, cfg.concentration)
            transitions = np.stack([
                rng.generator("task", "transitions", cluster).dirichlet(alpha, size=self.data_vocab)
                for cluster in range(cfg.num_clusters)
            ])
        if not np.allclose(transitions.sum(axis=-1), 1.0, atol=1e-6) or (transitions < 0).any():
            raise ConfigurationError("every transition row must be a probability distribution")
        self.transitions = transitions / transitions.sum(axis=-1, keepdims=True)
        self.cumulative = np.cumsum(self.transitions, axis=-1)

        if initial is None:
            initial = np.full((cfg.num_clusters, self.data_vocab), 1.0 / self.data_vocab)
        self.initial = np.asarray(initial, dtype=np.float64)
        self._eval_sets: Dict[int, List[Batch]] = {}

    def num_masked(self, seq_len: int) -> int:
        return int(round(self.cfg.mask_fraction * seq_len))

    def sample_sequences(self, batch: int, seq_len: int, rng: np.random.Generator):
        clusters = rng.integers(0, self.cfg.num_clusters, size=batch)
        sequences = np.zeros((batch, seq_len), dtype=np.int64)
        for row, cluster in enumerate(clusters):
            sequences[row, 0] = rng.choice(self.data_vocab, p=self.initial[cluster])
            draws = rng.random(seq_len - 1)
            table = self.cumulative[cluster]
            for position in range(1, seq_len):
                previous = sequences[row, position - 1]
                nxt = int(np.searchsorted(table[previous], draws[position - 1], side="right"))
                sequences[row, position] = min(nxt, self.data_vocab - 1)
        return sequences, clusters

    def generate_batch(self, batch: int, seq_len: int, rng: np.random.Generator) -> Batch:
        if seq_len > self.cfg.seq_len:
            raise ConfigurationError(f"seq_len {seq_len} exceeds the task's {self.cfg.seq_len}")
        clean, clusters = self.sample_sequences(batch, seq_len, rng)
        tokens = clean.copy()
        masked = self.num_masked(seq_len)
        positions = []
        for row in range(batch):
            chosen = np.sort(rng.permutation(seq_len)[:masked])
            positions.append(row * seq_len + chosen)
        positions = np.concatenate(positions).astype(np.int64) if positions else np.zeros(0, dtype=np.int64)
        targets = clean.reshape(-1)[positions]
        tokens.reshape(-1)[positions] = self.mask_token
        return Batch(tokens=tokens, positions=positions, targets=targets, clusters=clusters, clean=clean)

    def train_batch(self, batch: int, seed: int, step: int) -> Batch:
        """Training data is a pure function of (run seed, schedule step)."""
        return self.generate_batch(batch, self.cfg.seq_len, RngState(seed=self.cfg.seed).generator("train", seed, step))

    def eval_set(self, batch: int) -> List[Batch]:
        """Fixed held-out batches covering ``eval_tokens`` tokens, drawn from their own stream."""
        if batch not in self._eval_sets:
            sequences = max(1, -(-self.cfg.eval_tokens // self.cfg.seq_len))
            rng = RngState(seed=self.cfg.seed).generator("eval")
            self._eval_sets[batch] = [
                self.generate_batch(min(batch, sequences - start), self.cfg.seq_len, rng)
                for start in range(0, sequences, batch)
            ]
        return self._eval_sets[batch]

    def probe_set(self, sequences: int) -> Batch:
        return self.generate_batch(sequences, self.cfg.seq_len, RngState(seed=self.cfg.seed).generator("probe"))

    def entropy_rate(self) -> float:
        """Mean per-token entropy of the chains (nats), uniform over clusters and states."""
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(self.transitions > 0, np.log(self.transitions), 0.0)
        return float(-(self.transitions * logs).sum(axis=-1).mean())
