"""Dense linear algebra helpers and reproducible counter-based random streams."""

from __future__ import annotations

import hashlib
from typing import Sequence, Union

import numpy as np

# simulation path runs in 32 bit; test oracles use 64 bit
FLOAT = np.float32

_MASK64 = (1 << 64) - 1

StreamKey = Union[int, str]


def matmul(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact matrix-vector (or matrix-batch) product ``m @ x``.

    ``x`` may be a vector of length ``m.shape[1]`` or a batch of shape
    ``(batch, m.shape[1])``, in which case the result has shape
    ``(batch, m.shape[0])``.
    """
    m = np.asarray(m)
    x = np.asarray(x)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if x.shape[-1] != m.shape[1]:
        raise ValueError(f"dimension mismatch: matrix {m.shape} vs input {x.shape}")
    if x.ndim == 1:
        return m @ x
    return x @ m.T


def _key_to_int(key: StreamKey) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    return int(key) & _MASK64


class RandomStream:
    """A Philox stream addressed by ``(seed, stream_id, counter)``.

    Identical addresses always produce identical draws.  Distinct
    ``stream_id`` values select distinct Philox keys, so their sequences are
    independent.  Use :meth:`child` to derive sub-streams for individual
    tiles or noise sites so that results never depend on evaluation order
    across tiles.
    """

    def __init__(self, seed: int, stream_id: StreamKey = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = _key_to_int(stream_id)
        self._bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([int(counter) & _MASK64, 0, 0, 0], dtype=np.uint64),
        )
        self.rng = np.random.Generator(self._bitgen)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        return int(self._bitgen.state["state"]["counter"][0])

    def child(self, *keys: StreamKey) -> "RandomStream":
        """Derive an independent stream from this one and ``keys``."""
        entropy = [self.seed, self.stream_id] + [_key_to_int(k) for k in keys]
        sid = int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
        return RandomStream(self.seed, sid)

    def gaussian(self, shape: Union[int, Sequence[int]], dtype=np.float64) -> np.ndarray:
        return self.rng.standard_normal(shape, dtype=dtype)

    def uniform(self, shape: Union[int, Sequence[int]], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.rng.uniform(low, high, shape)

    def bernoulli(self, p: np.ndarray, shape: Sequence[int] | None = None) -> np.ndarray:
        """Boolean draws with success probability ``p`` (broadcast to ``shape``)."""
        p = np.asarray(p)
        shape = p.shape if shape is None else tuple(shape)
        return self.rng.random(shape, dtype=np.float32) < p

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self.rng.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.rng.permutation(n)


def gaussian(stream: RandomStream, n: int) -> np.ndarray:
    """``n`` standard-normal draws from ``stream`` (advances the stream)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return stream.gaussian(n)
