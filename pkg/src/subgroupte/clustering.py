"""Online 1-D K-means over pre-subgrouping treatment effects.

Centroids live on the real line (treatment effects are scalars). Each
E-step shifts the stored centroids toward the current effect density with a
Gaussian-kernel mean-shift step, assigns samples to the nearest shifted
centroid, and recomputes centroids as cluster means; empty clusters keep
their shifted position so the cluster count never drops.

The four per-sample kernels come from the compiled ``_ckernels`` module when
it was built, otherwise from the numpy fallback in ``_pykernels``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .nn import ConfigurationError, RngStream

if os.environ.get("SUBGROUPTE_PURE_PYTHON") == "1":
    from . import _pykernels as _kernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _kernels
        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _kernels
        BACKEND = "python"


class SizeError(ValueError):
    """Not enough samples for the requested operation."""


@dataclass
class CentroidSet:
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    h: float = 1.0
    initialized: bool = False

    @property
    def K(self) -> int:
        return len(self.mu)

    def copy(self) -> "CentroidSet":
        return CentroidSet(self.mu.copy(), self.h, self.initialized)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.mu).tobytes()
                              + repr((self.h, self.initialized)).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {"K": self.K, "h": float(self.h), "mu": [float(m) for m in self.mu],
                "initialized": self.initialized}

    @classmethod
    def from_dict(cls, d: dict) -> "CentroidSet":
        mu = np.asarray(d["mu"], dtype=np.float64)
        if len(mu) != d["K"]:
            raise ConfigurationError("centroid count does not match K")
        return cls(mu, float(d["h"]), bool(d.get("initialized", True)))


def _vec(te) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(te, dtype=np.float64).reshape(-1))


def silverman_bandwidth(te, floor: float = 1e-3) -> float:
    """Silverman's rule of thumb, ``0.9 min(sd, IQR/1.34) n^(-1/5)``, floored."""
    te = _vec(te)
    n = len(te)
    if n < 2:
        return floor
    sd = te.std(ddof=1)
    q75, q25 = np.percentile(te, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return max(0.9 * spread * n ** (-0.2), floor)


def init_kmeanspp(te_batch, K: int, rng: RngStream) -> CentroidSet:
    """k-means++ seeding: uniform first pick, then D^2-weighted picks."""
    te = _vec(te_batch)
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    if len(te) < K:
        raise SizeError(f"k-means++ needs at least K={K} samples, got {len(te)}")
    chosen = [te[rng.integers(len(te))]]
    d2 = (te - chosen[0]) ** 2
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # every point already coincides with a centroid
            idx = rng.integers(len(te))
        else:
            idx = rng.choice(len(te), p=d2 / total)
        chosen.append(te[idx])
        d2 = np.minimum(d2, (te - te[idx]) ** 2)
    return CentroidSet(np.array(chosen, dtype=np.float64), silverman_bandwidth(te), True)


def kde_adjust(centroids: CentroidSet, te_batch, h: float | None = None) -> np.ndarray:
    """Shift each centroid by the kernel-weighted mean displacement of the batch."""
    if not centroids.initialized:
        raise ConfigurationError("centroids are not initialised")
    te = _vec(te_batch)
    if len(te) == 0:
        raise SizeError("empty batch")
    bw = centroids.h if h is None else h
    return _kernels.kde_adjust(_vec(centroids.mu), te, float(bw))


def hard_assign(mu_star, te_batch) -> np.ndarray:
    """Index of the nearest centroid per sample; ties go to the lowest index."""
    return _kernels.hard_assign(_vec(mu_star), _vec(te_batch))


def one_hot(labels, K: int) -> np.ndarray:
    out = np.zeros((len(labels), K))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def update_centroids(centroids: CentroidSet, mu_star, assignment, te_batch) -> CentroidSet:
    """Cluster means for non-empty clusters, the shifted centroid otherwise.

    ``assignment`` may be label indices or a one-hot ``[N, K]`` matrix.
    """
    assignment = np.asarray(assignment)
    labels = assignment.argmax(axis=1) if assignment.ndim == 2 else assignment
    mu_star = _vec(mu_star)
    if len(mu_star) != centroids.K:
        raise ConfigurationError("mu_star length differs from K")
    mu = _kernels.update_centroids(mu_star, np.ascontiguousarray(labels, dtype=np.int64),
                                   _vec(te_batch))
    return CentroidSet(mu, centroids.h, True)


def soft_probabilities(centroids: CentroidSet, te_batch) -> np.ndarray:
    """Row-wise softmax of negative absolute distances to the centroids."""
    if not centroids.initialized:
        raise ConfigurationError("centroids are not initialised")
    return _kernels.soft_probabilities(_vec(centroids.mu), _vec(te_batch))


def cluster_step(centroids: CentroidSet, te_batch, adapt_bandwidth: bool = True) -> CentroidSet:
    """One E-step on a batch: bandwidth refresh, KDE shift, assign, update."""
    te = _vec(te_batch)
    if adapt_bandwidth:
        centroids = CentroidSet(centroids.mu, silverman_bandwidth(te), True)
    mu_star = kde_adjust(centroids, te)
    labels = hard_assign(mu_star, te)
    return update_centroids(centroids, mu_star, labels, te)


def fit_full_batch(te, K: int, rng: RngStream, max_iter: int = 100) -> CentroidSet:
    """Seed with k-means++ and iterate :func:`cluster_step` on all of ``te`` to a fixed point."""
    te = _vec(te)
    cs = init_kmeanspp(te, K, rng)
    for _ in range(max_iter):
        nxt = cluster_step(cs, te)
        if np.array_equal(nxt.mu, cs.mu):
            break
        cs = nxt
    return cs
