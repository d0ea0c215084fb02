"""Distributional distances between sample sets."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import wasserstein_distance

from tracelab import _rng
from tracelab.errors import DomainError


def _check(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return a, b


def projections(dim: int, n_proj: int = 64, seed: int = 0) -> np.ndarray:
    """Unit directions for slicing; in one dimension every slice is the identity."""
    if dim == 1:
        return np.ones((1, 1))
    v = _rng.stream(seed, 41).standard_normal((n_proj, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_w1(a, b, n_proj: int = 64, seed: int = 0) -> float:
    """Mean over random directions of the 1D Wasserstein-1 distance between projections."""
    a, b = _check(a, b)
    dirs = projections(a.shape[1], n_proj, seed)
    pa = a @ dirs.T
    pb = b @ dirs.T
    return float(np.mean([wasserstein_distance(pa[:, k], pb[:, k]) for k in range(dirs.shape[0])]))


def mmd_rbf(a, b, max_n: int = 2000, seed: int = 0) -> float:
    """Biased RBF-kernel MMD with the median pairwise distance as bandwidth.

    Sets larger than ``max_n`` are subsampled with a fixed seed.
    """
    a, b = _check(a, b)
    if a.shape[0] > max_n:
        a = a[np.sort(_rng.stream(seed, 42).choice(a.shape[0], max_n, replace=False))]
    if b.shape[0] > max_n:
        b = b[np.sort(_rng.stream(seed, 42).choice(b.shape[0], max_n, replace=False))]
    pooled = np.concatenate([a, b])
    med = np.median(pdist(pooled)) if pooled.shape[0] > 1 else 0.0
    if med <= 0:
        med = 1.0
    gamma = 1.0 / (2.0 * med * med)
    kxx = np.exp(-gamma * cdist(a, a, "sqeuclidean")).mean()
    kyy = np.exp(-gamma * cdist(b, b, "sqeuclidean")).mean()
    kxy = np.exp(-gamma * cdist(a, b, "sqeuclidean")).mean()
    return float(np.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0)))


def eval_metrics(samples_a, samples_b, n_proj: int = 64, seed: int = 0) -> tuple[float, float]:
    """Return ``(sliced_w1, mmd_rbf)``."""
    return sliced_w1(samples_a, samples_b, n_proj, seed), mmd_rbf(samples_a, samples_b, seed=seed)
