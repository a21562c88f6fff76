"""Kernels over flattened particle vectors.

``kernel_table`` returns the kernel matrix ``K[j, i] = k(x_j, x_i)`` together
with ``G[j, i] = grad_{x_j} k(x_j, x_i)``, the two ingredients of the Stein
update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import pairwise_distances

KERNEL_KINDS = ("rbf-median", "rbf-fixed", "cosine")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf-median"
    h: float | None = None
    h_min: float = 1e-8

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "rbf-fixed" and (self.h is None or not self.h > 0):
            raise ValueError("rbf-fixed kernel requires a bandwidth h > 0")
        if not self.h_min > 0:
            raise ValueError("h_min must be positive")


def median_bandwidth(dists, m: int, h_min: float = 1e-8) -> float:
    """``med**2 / ln(M)`` where ``med`` is the median off-diagonal distance."""
    if m < 2:
        raise ValueError("median bandwidth needs at least 2 particles")
    d = np.asarray(dists, dtype=np.float64)
    if d.shape != (m, m):
        raise ValueError(f"expected a {m}x{m} distance matrix, got {d.shape}")
    med = float(np.median(d[np.triu_indices(m, k=1)]))
    return max(med * med / math.log(m), h_min)


def _pair(x, y):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def rbf_eval(x, y, h: float) -> float:
    x, y = _pair(x, y)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    diff = x - y
    return float(np.exp(-np.dot(diff, diff) / h))


def rbf_grad_first(x, y, h: float) -> np.ndarray:
    """Gradient of ``exp(-|x - y|^2 / h)`` with respect to ``x``."""
    x, y = _pair(x, y)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    diff = x - y
    return -(2.0 / h) * diff * np.exp(-np.dot(diff, diff) / h)


def _norms_nonzero(*vectors):
    norms = []
    for idx, v in enumerate(vectors):
        n = float(np.linalg.norm(v))
        if n == 0.0:
            raise ValueError(f"cosine kernel undefined for zero vector (argument {idx})")
        norms.append(n)
    return norms


def cosine_eval(x, y) -> float:
    x, y = _pair(x, y)
    nx, ny = _norms_nonzero(x, y)
    return float(np.dot(x, y) / (nx * ny))


def cosine_grad_first(x, y) -> np.ndarray:
    x, y = _pair(x, y)
    nx, ny = _norms_nonzero(x, y)
    return y / (nx * ny) - np.dot(x, y) * x / (nx**3 * ny)


@dataclass
class KernelTable:
    K: np.ndarray  # (M, M), K[j, i] = k(x_j, x_i)
    G: np.ndarray  # (M, M, d), G[j, i] = grad_{x_j} k(x_j, x_i)
    h: float | None = None


def kernel_table(particles, spec: KernelSpec) -> KernelTable:
    x = np.asarray(particles, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"particles must be M x d, got shape {x.shape}")
    m = x.shape[0]
    if m < 2:
        raise ValueError("kernel_table needs at least 2 particles")

    if spec.kind == "cosine":
        norms = np.linalg.norm(x, axis=1)
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise ValueError(f"cosine kernel undefined: particle {int(bad[0])} has zero norm")
        dots = x @ x.T
        K = dots / np.outer(norms, norms)
        # G[j, i] = x_i / (|x_j||x_i|) - (x_j . x_i) x_j / (|x_j|^3 |x_i|)
        G = (x[None, :, :] / (norms[:, None, None] * norms[None, :, None])
             - dots[:, :, None] * x[:, None, :] / (norms[:, None, None] ** 3 * norms[None, :, None]))
        return KernelTable(K=K, G=G)

    if spec.kind == "rbf-median":
        h = median_bandwidth(pairwise_distances(x), m, spec.h_min)
    else:
        h = max(float(spec.h), spec.h_min)
    diff = x[:, None, :] - x[None, :, :]  # diff[j, i] = x_j - x_i
    sq = np.sum(diff * diff, axis=-1)
    K = np.exp(-sq / h)
    G = -(2.0 / h) * diff * K[:, :, None]
    return KernelTable(K=K, G=G, h=h)
