"""Dense float64 matrix helpers and an explicit-state random number generator.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
helpers here only add shape checking and the handful of numerically careful
routines the rest of the package shares.
"""
from __future__ import annotations

import zlib

import numpy as np


def as_matrix(x, name: str = "array") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array or raise ``ValueError``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    x = as_matrix(logits, "logits")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_last(x: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis of an N-d array.

    ``valid`` (broadcastable boolean) marks positions that take part; the
    remaining positions get probability exactly zero.
    """
    if valid is not None:
        x = np.where(valid, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def pairwise_distances(particles) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``particles``.

    Exactly symmetric with a zero diagonal.
    """
    try:
        x = np.asarray(particles, dtype=np.float64)
    except ValueError as exc:
        raise ValueError("particles have ragged dimensions") from exc
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"particles must be an M x d array, got shape {x.shape}")
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    # Summation order can differ between (i, j) and (j, i); pin the lower
    # triangle to the upper one.
    iu = np.triu_indices(x.shape[0], k=1)
    d.T[iu] = d[iu]
    np.fill_diagonal(d, 0.0)
    return d


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Seeded generator for one named consumer stream.

    Streams with different names are statistically independent, so adding a
    new consumer never shifts the draws of an existing one. ``position``
    counts the scalar draws handed out so far.
    """

    def __init__(self, seed: int, stream: str = "default"):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.stream = stream
        self.position = 0
        ss = np.random.SeedSequence([self.seed, _stream_key(stream)])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def gaussian(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("gaussian draw count must be >= 1")
        self.position += n
        return self._gen.standard_normal(n)

    def uniform(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("uniform draw count must be >= 1")
        self.position += n
        return self._gen.random(n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        self.position += n
        return self._gen.integers(low, high, size=n)

    def permutation(self, n: int) -> np.ndarray:
        self.position += n
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r}, position={self.position})"


def gaussian(rng: Rng, n: int) -> np.ndarray:
    """``n`` standard-normal draws from ``rng`` (advances it)."""
    return rng.gaussian(n)
