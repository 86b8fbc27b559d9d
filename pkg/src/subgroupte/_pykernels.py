"""Vectorised numpy implementations of the clustering kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``SUBGROUPTE_PURE_PYTHON=1`` is set.
"""

import numpy as np


def kde_adjust(mu, te, h):
    diff = te[:, None] - mu[None, :]
    expo = -0.5 * (diff / h) ** 2
    # shift per centroid so the largest weight is exp(0); keeps the normaliser > 0
    w = np.exp(expo - expo.max(axis=0, keepdims=True))
    w /= w.sum(axis=0, keepdims=True)
    return mu + (w * diff).sum(axis=0)


def hard_assign(mu, te):
    return np.argmin(np.abs(te[:, None] - mu[None, :]), axis=1).astype(np.int64)


def update_centroids(mu_star, labels, te):
    k = mu_star.shape[0]
    counts = np.bincount(labels, minlength=k)
    sums = np.bincount(labels, weights=te, minlength=k)
    out = mu_star.copy()
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled]
    return out


def soft_probabilities(mu, te):
    d = np.abs(te[:, None] - mu[None, :])
    e = np.exp(-(d - d.min(axis=1, keepdims=True)))
    return e / e.sum(axis=1, keepdims=True)
