"""Datasets, outcome simulation, CSV ingestion and train/dev/test splits."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import DimensionError, RngStream

BETA_VALUES = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
BETA_PROBS = np.array([0.6, 0.1, 0.1, 0.1, 0.1])
SURFACE_OFFSET = 0.5
TARGET_ATT = 4.0
RESERVED_COLUMNS = ("t", "y", "mu0", "mu1", "id")
# extra entries holding one value per row; subset() slices these
ROW_EXTRAS = ("group",)


class IngestionError(ValueError):
    """A data file could not be read into a Dataset."""


class SizeError(ValueError):
    """Dataset too small for the requested operation."""


class Sample(NamedTuple):
    x: np.ndarray
    t: int
    y: float
    mu0: float | None
    mu1: float | None


@dataclass
class Dataset:
    """Column-oriented dataset; ``mu0``/``mu1`` are present only with ground truth."""

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    provenance: str = "synthetic"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DimensionError("covariates must be a 2-D matrix")
        self.t = np.asarray(self.t, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = len(self.X)
        if len(self.t) != n or len(self.y) != n:
            raise DimensionError("covariate, treatment and outcome lengths differ")
        if not np.isin(self.t, (0, 1)).all():
            raise ValueError("treatment must be binary")

    def __len__(self):
        return len(self.X)

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.t[i]), float(self.y[i]),
                      None if self.mu0 is None else float(self.mu0[i]),
                      None if self.mu1 is None else float(self.mu1[i]))

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    @property
    def true_te(self) -> np.ndarray | None:
        return self.mu1 - self.mu0 if self.has_truth else None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        extra = {k: (v[idx] if k in ROW_EXTRAS else v) for k, v in self.extra.items()}
        return Dataset(self.X[idx], self.t[idx], self.y[idx],
                       None if self.mu0 is None else self.mu0[idx],
                       None if self.mu1 is None else self.mu1[idx],
                       self.provenance, extra)


class Surface(NamedTuple):
    mu0: np.ndarray
    mu1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    beta: np.ndarray
    omega: float


def standardize(X: np.ndarray) -> np.ndarray:
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def response_surface_b(X, rng: RngStream, t=None, beta=None, omega=None) -> Surface:
    """Hill's Response Surface B.

    ``mu0 = exp((X + 0.5) beta)``, ``mu1 = X beta - omega``, with ``omega``
    calibrated so the average effect over treated rows (all rows when ``t`` is
    None) is 4. ``X`` is expected already standardised. Passing ``beta`` or
    ``omega`` overrides the sampled/calibrated values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.size == 0:
        raise DimensionError("response surface needs a non-empty 2-D covariate matrix")
    if beta is None:
        beta = rng.choice(BETA_VALUES, size=X.shape[1], p=BETA_PROBS)
    beta = np.asarray(beta, dtype=np.float64)
    lin = X @ beta
    mu0 = np.exp((X + SURFACE_OFFSET) @ beta)
    if omega is None:
        treated = np.ones(len(X), bool) if t is None else np.asarray(t) == 1
        if not treated.any():
            treated = np.ones(len(X), bool)
        omega = float(np.mean(lin[treated] - mu0[treated]) - TARGET_ATT)
    mu1 = lin - omega
    noise = rng.normal(size=(2, len(X)))
    return Surface(mu0, mu1, mu0 + noise[0], mu1 + noise[1], beta, float(omega))


def _attach_outcomes(X, t, rng: RngStream, provenance: str, extra=None) -> Dataset:
    surf = response_surface_b(standardize(X), rng.child("surface"), t=t)
    y = np.where(t == 1, surf.y1, surf.y0)
    extra = dict(extra or {})
    extra.update(beta=surf.beta, omega=surf.omega)
    return Dataset(X, t, y, surf.mu0, surf.mu1, provenance, extra)


def generate_synthetic(n_case: int = 500, n_control: int = 500, p: int = 10,
                       rng: RngStream | None = None, confounded: bool = False) -> Dataset:
    """Normal covariates with per-feature means/scales, Response Surface B outcomes.

    The first ``n_case`` rows are treated unless ``confounded`` is set, in
    which case treatment is drawn with probability ``sigmoid(x . c)``.
    """
    rng = rng or RngStream(0)
    n = n_case + n_control
    if p < 1:
        raise DimensionError("need at least one feature")
    if n < 1:
        raise SizeError("dataset must contain at least one sample")
    prng = rng.child("covariate-params")
    means = prng.uniform(-1.0, 1.0, size=p)
    scales = prng.uniform(0.5, 1.5, size=p)
    X = rng.child("covariates").normal(means, scales, size=(n, p))
    if confounded:
        c = rng.child("assignment-coef").normal(0.0, 0.5, size=p)
        prob = 1.0 / (1.0 + np.exp(-(standardize(X) @ c)))
        t = (rng.child("assignment").random(n) < prob).astype(np.int64)
    else:
        t = np.r_[np.ones(n_case, np.int64), np.zeros(n_control, np.int64)]
    return _attach_outcomes(X, t, rng, "synthetic")


def generate_ihdp_like(rng: RngStream | None = None, n_case: int = 139,
                       n_control: int = 608) -> Dataset:
    """IHDP-shaped covariates (6 continuous, 19 binary) with simulated outcomes.

    Stands in for the real IHDP covariates when no CSV is supplied.
    """
    rng = rng or RngStream(0)
    n = n_case + n_control
    crng = rng.child("covariates")
    cont = crng.normal(size=(n, 6))
    # mild skew on a few continuous columns, as in birth-weight style covariates
    cont[:, :2] = np.sinh(0.5 * cont[:, :2])
    rates = rng.child("binary-rates").uniform(0.1, 0.9, size=19)
    binary = (crng.random((n, 19)) < rates).astype(np.float64)
    X = np.hstack([cont, binary])
    t = np.r_[np.ones(n_case, np.int64), np.zeros(n_control, np.int64)]
    return _attach_outcomes(X, t, rng, "semi-synthetic")


def generate_planted(n: int = 1000, p: int = 10, effects=(-2.0, 1.0, 4.0),
                     noise: float = 0.5, rng: RngStream | None = None) -> Dataset:
    """Data with a known subgroup structure.

    Samples fall into ``len(effects)`` equal-mass groups by quantiles of the
    first covariate; each group has a constant treatment effect. The planted
    labels are kept in ``extra['group']``.
    """
    rng = rng or RngStream(0)
    X = rng.child("covariates").normal(size=(n, p))
    cuts = np.quantile(X[:, 0], np.linspace(0, 1, len(effects) + 1)[1:-1])
    group = np.searchsorted(cuts, X[:, 0]).astype(np.int64)
    base = 1.0 + 0.5 * X[:, 1 % p]
    mu0 = base
    mu1 = base + np.asarray(effects, dtype=np.float64)[group]
    t = rng.child("assignment").permutation(np.r_[np.ones(n // 2), np.zeros(n - n // 2)]).astype(np.int64)
    eps = rng.child("noise").normal(0.0, noise, size=n)
    y = np.where(t == 1, mu1, mu0) + eps
    return Dataset(X, t, y, mu0, mu1, "synthetic", {"group": group})


def split_6_2_2(n_or_data, rng: RngStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/dev/test indices of sizes floor(0.6N), floor(0.2N), rest."""
    n = n_or_data if isinstance(n_or_data, (int, np.integer)) else len(n_or_data)
    if n < 5:
        raise SizeError(f"need at least 5 samples to split, got {n}")
    perm = rng.permutation(n)
    n_train, n_dev = int(0.6 * n), int(0.2 * n)
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_dev]),
            np.sort(perm[n_train + n_dev:]))


class Standardizer:
    """Per-feature z-scoring with statistics from a reference (training) matrix."""

    def __init__(self, mean: np.ndarray, scale: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(d["mean"], d["scale"])


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(data: Dataset, path) -> None:
    """Write ``f0..f{p-1}, t, y[, mu0, mu1]`` with round-trip float formatting."""
    header = [f"f{j}" for j in range(data.p)] + ["t", "y"]
    if data.has_truth:
        header += ["mu0", "mu1"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [_fmt(v) for v in data.X[i]] + [str(int(data.t[i])), _fmt(data.y[i])]
            if data.has_truth:
                row += [_fmt(data.mu0[i]), _fmt(data.mu1[i])]
            w.writerow(row)


def load_external_csv(path, treatment_col: str = "t", outcome_cols=("y", "mu0", "mu1"),
                      rng: RngStream | None = None) -> Dataset:
    """Read a covariate CSV; simulate Response Surface B outcomes when none are given.

    Every column other than the treatment, outcome columns and ``id`` is a
    feature. With ``y`` but no ``mu0``/``mu1`` the dataset has no ground truth.
    """
    if not os.path.exists(path):
        raise IngestionError(f"{path}: file not found")
    y_col, mu0_col, mu1_col = (list(outcome_cols) + [None, None, None])[:3]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if treatment_col not in header:
            raise IngestionError(f"{path}: missing treatment column {treatment_col!r}")
        reserved = {treatment_col, y_col, mu0_col, mu1_col, "id"}
        feat_idx = [j for j, h in enumerate(header) if h not in reserved]
        col = {h: j for j, h in enumerate(header)}
        X, t, y, mu0, mu1 = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                X.append([float(row[j]) for j in feat_idx])
                tv = float(row[col[treatment_col]])
                if tv not in (0.0, 1.0):
                    raise ValueError(f"treatment value {tv} is not binary")
                t.append(int(tv))
                if y_col in col:
                    y.append(float(row[col[y_col]]))
                if mu0_col in col and mu1_col in col:
                    mu0.append(float(row[col[mu0_col]]))
                    mu1.append(float(row[col[mu1_col]]))
            except ValueError as exc:
                raise IngestionError(f"{path}: row {lineno}: {exc}") from exc
    if not X:
        raise IngestionError(f"{path}: no data rows")
    X = np.asarray(X, dtype=np.float64).reshape(len(t), len(feat_idx))
    t = np.asarray(t, dtype=np.int64)
    if not y and not mu0:
        ds = _attach_outcomes(X, t, rng or RngStream(0), "external")
        ds.extra["simulated_outcomes"] = True
        return ds
    if not y:
        noise = (rng or RngStream(0)).child("noise").normal(size=len(t))
        y = np.where(t == 1, mu1, mu0) + noise
    return Dataset(X, t, np.asarray(y), np.asarray(mu0) if mu0 else None,
                   np.asarray(mu1) if mu1 else None, "external")
