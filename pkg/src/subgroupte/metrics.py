"""Effect-estimation and subgrouping metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


class UnsupportedMetricError(ValueError):
    """The metric needs inputs that are not available (e.g. no ground truth)."""


def _effects(pred_y1, pred_y0, true_mu1, true_mu0):
    if true_mu1 is None or true_mu0 is None:
        raise UnsupportedMetricError("ground-truth potential outcomes are required")
    arrs = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (pred_y1, pred_y0, true_mu1, true_mu0)]
    if len({len(a) for a in arrs}) != 1:
        raise ValueError("prediction and ground-truth vectors differ in length")
    return arrs[0] - arrs[1], arrs[2] - arrs[3]


def pehe(pred_y1, pred_y0, true_mu1, true_mu0) -> float:
    """Mean squared error of individual effects (no square root)."""
    te_hat, te = _effects(pred_y1, pred_y0, true_mu1, true_mu0)
    return float(np.mean((te_hat - te) ** 2))


def eps_ate(pred_y1, pred_y0, true_mu1, true_mu0) -> float:
    """Absolute error of the average treatment effect."""
    te_hat, te = _effects(pred_y1, pred_y0, true_mu1, true_mu0)
    return float(abs(te_hat.mean() - te.mean()))


def _groups(te_values, assignments, K):
    te = np.asarray(te_values, dtype=np.float64).reshape(-1)
    a = np.asarray(assignments)
    if a.ndim == 2:
        a = a.argmax(axis=1)
    a = a.astype(np.int64)
    if len(a) != len(te):
        raise ValueError("assignment and effect vectors differ in length")
    if len(a) and (a.min() < 0 or a.max() >= K):
        raise ValueError(f"assignment index outside [0, {K})")
    return [te[a == k] for k in range(K)]


def subgroup_variances(te_values, hard_assignments, K: int) -> tuple[float, float]:
    """``(v_within, v_across)`` with population variances; empty groups are skipped."""
    groups = [g for g in _groups(te_values, hard_assignments, K) if len(g)]
    if not groups:
        raise UnsupportedMetricError("all subgroups are empty")
    v_within = float(np.mean([g.var() for g in groups]))
    v_across = float(np.var([g.mean() for g in groups]))
    return v_within, v_across


@dataclass
class SubgroupStats:
    count: int
    mean: float | None = None
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    p5: float | None = None
    p95: float | None = None


def subgroup_summary(te_values, hard_assignments, K: int) -> list[SubgroupStats]:
    """Boxplot statistics per subgroup (linear-interpolation percentiles)."""
    out = []
    for g in _groups(te_values, hard_assignments, K):
        if len(g) == 0:
            out.append(SubgroupStats(0))
            continue
        p5, q1, med, q3, p95 = np.percentile(g, [5, 25, 50, 75, 95])
        out.append(SubgroupStats(len(g), float(g.mean()), float(med), float(q1), float(q3),
                                 float(p5), float(p95)))
    return out


@dataclass
class MetricsReport:
    pehe: float | None
    eps_ate: float | None
    v_within: float | None
    v_across: float | None
    factual_mse: float | None = None
    per_subgroup: dict[str, list[SubgroupStats]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_subgroup"] = {k: [SubgroupStats(**s) for s in v]
                             for k, v in d.get("per_subgroup", {}).items()}
        return cls(**d)


def evaluate(pred_y0, pred_y1, te_pre, centroids_mu, mu0=None, mu1=None,
             y=None, t=None) -> MetricsReport:
    """Full report for one split.

    Samples are grouped by nearest final centroid to their pre-subgrouping
    effect. Variances use true effects when ground truth exists and predicted
    effects otherwise; both ``pred`` and ``true`` summaries are included.
    """
    from .clustering import hard_assign

    pred_y0 = np.asarray(pred_y0, dtype=np.float64)
    pred_y1 = np.asarray(pred_y1, dtype=np.float64)
    K = len(centroids_mu)
    labels = hard_assign(centroids_mu, te_pre)
    te_hat = pred_y1 - pred_y0
    summaries = {"pred": subgroup_summary(te_hat, labels, K)}
    has_truth = mu0 is not None and mu1 is not None
    if has_truth:
        te_true = np.asarray(mu1) - np.asarray(mu0)
        summaries["true"] = subgroup_summary(te_true, labels, K)
        vw, va = subgroup_variances(te_true, labels, K)
        p, e = pehe(pred_y1, pred_y0, mu1, mu0), eps_ate(pred_y1, pred_y0, mu1, mu0)
    else:
        vw, va = subgroup_variances(te_hat, labels, K)
        p = e = None
    fmse = None
    if y is not None and t is not None:
        t = np.asarray(t)
        fmse = float(np.mean((np.where(t == 1, pred_y1, pred_y0) - np.asarray(y)) ** 2))
    return MetricsReport(p, e, vw, va, fmse, summaries)


def rand_index(a, b) -> float:
    """Fraction of sample pairs on which two partitions agree."""
    a, b = np.asarray(a), np.asarray(b)
    n = len(a)
    if n < 2:
        return 1.0
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    iu = np.triu_indices(n, 1)
    return float((same_a == same_b)[iu].mean())


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
