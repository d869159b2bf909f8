import hashlib
from typing import Union

import numpy as np
from pydantic import BaseModel, Field

__all__ = ["RngState"]

StreamKey = Union[str, int]


class RngState(BaseModel):
    """Counter-based splittable generator state.

    Every draw goes through a named stream: the Philox key is derived from
    ``(seed, *stream)`` and the counter offsets the stream. Adding a new
    consumer (another expert, another layer) never shifts the draws of an
    existing one.
    """

    seed: int = Field(0, ge=0, lt=2**64)
    counter: int = Field(0, ge=0, lt=2**64)

    @staticmethod
    def _key(seed: int, stream: tuple) -> np.ndarray:
        label = "/".join(str(part) for part in stream)
        digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
        return np.frombuffer(digest[:16], dtype="<u8").copy()

    def generator(self, *stream: StreamKey) -> np.random.Generator:
        bit_generator = np.random.Philox(
            key=self._key(self.seed, stream),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bit_generator)

    def advance(self, steps: int = 1) -> "RngState":
        return RngState(seed=self.seed, counter=(self.counter + steps) % 2**64)

    def normal(self, shape, stddev: float, *stream: StreamKey) -> np.ndarray:
        draws = self.generator(*stream).standard_normal(size=shape, dtype=np.float64)
        return (draws * stddev).astype(np.float32)

    def truncated_normal(self, shape, stddev: float, *stream: StreamKey, bound: float = 2.0) -> np.ndarray:
        """Normal(0, stddev²) resampled until every value lies within ±bound·stddev."""
        rng = self.generator(*stream)
        draws = rng.standard_normal(size=shape, dtype=np.float64)
        outside = np.abs(draws) > bound
        while outside.any():
            draws[outside] = rng.standard_normal(size=int(outside.sum()), dtype=np.float64)
            outside = np.abs(draws) > bound
        return (draws * stddev).astype(np.float32)
