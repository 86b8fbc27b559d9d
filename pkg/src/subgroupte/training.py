"""EM training for SubgroupTE.

Every mini-batch runs an E-step (network frozen: shift, assign and update
the centroids from the batch's pre-subgrouping effects) followed by an
M-step (centroids frozen: soft subgroup probabilities feed the prediction
heads and one SGD step is taken on the weighted loss).

Modes ``O`` and ``P`` are the ablations: both pre-train the representation
and pre-subgrouping heads first; ``O`` then fits the centroids once and
keeps them fixed, ``P`` continues with the ordinary EM loop.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import clustering, nn
from .clustering import CentroidSet
from .data import Dataset, Standardizer
from .metrics import evaluate
from .model import ModelConfig, SubgroupTENet
from .nn import ConfigurationError, RngStream, Value

log = logging.getLogger(__name__)

MODES = ("full", "O", "P")
TRACE_COLUMNS = ("epoch", "l_t", "l_pre", "l_post", "dev_pehe", "v_within", "v_across")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    K: int = 4
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 300
    patience: int = 30
    pretrain_epochs: int = 50
    seed: int = 0
    mode: str = "full"
    hidden: int = 100
    d: int = 32
    heads: int = 2
    encoder_layers: int = 1
    lr_schedule: str = "constant"
    min_lr_frac: float = 0.0
    scale_outcomes: bool = True
    v_grad: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ConfigurationError(f"{name}={val} outside [0, 1]")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, epoch: int, epochs: int) -> float:
        """Learning rate for ``epoch`` of a phase lasting ``epochs`` epochs."""
        if self.lr_schedule == "constant" or epochs <= 1:
            return self.lr
        floor = self.lr * self.min_lr_frac
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))

    def model_config(self, p: int) -> ModelConfig:
        return ModelConfig(p=p, d=self.d, heads=self.heads, encoder_layers=self.encoder_layers,
                           hidden=self.hidden, K=self.K)


class LossComponents(NamedTuple):
    l_t: float
    l_pre: float
    l_post: float
    total: float


@dataclass
class EpochTrace:
    epoch: int
    l_t: float
    l_pre: float
    l_post: float
    dev_pehe: float | None
    v_within: float | None
    v_across: float | None
    dev_mse: float = math.nan


class Batch(NamedTuple):
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray


@dataclass
class OutcomeScaler:
    mean: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, y) -> "OutcomeScaler":
        sd = float(np.std(y))
        return cls(float(np.mean(y)), sd if sd > 0 else 1.0)

    def transform(self, y):
        return (np.asarray(y) - self.mean) / self.scale

    def inverse(self, y):
        return np.asarray(y) * self.scale + self.mean


def uniform_v(K: int):
    return lambda te: np.full((len(te), K), 1.0 / K)


def subgroup_v(centroids: CentroidSet):
    if not centroids.initialized:
        return uniform_v(centroids.K)
    return lambda te: clustering.soft_probabilities(centroids, te)


def e_step(net: SubgroupTENet, centroids: CentroidSet, batch: Batch, rng: RngStream,
           te_pre: np.ndarray | None = None) -> CentroidSet:
    """Centroid update with the network frozen.

    ``te_pre`` may be passed when the caller already ran the forward pass
    with the current parameters; it is recomputed otherwise.
    """
    if te_pre is None:
        te_pre = net.pre_estimate(net.represent(batch.x))[2].data.reshape(-1)
    if not centroids.initialized:
        centroids = clustering.init_kmeanspp(te_pre, centroids.K, rng)
    return clustering.cluster_step(centroids, te_pre)


def _differentiable_v(te: Value, centroids: CentroidSet) -> Value:
    dist = nn.absolute(nn.sub(te, Value(centroids.mu.reshape(1, -1))))
    return nn.softmax(nn.scale(dist, -1.0), axis=-1)


def compute_losses(net: SubgroupTENet, centroids: CentroidSet, batch: Batch, cfg: TrainConfig,
                   v_mode: str = "subgroup", pre=None):
    """Forward pass and weighted loss. Returns ``(total Value, LossComponents)``.

    ``pre`` is an optional ``(z, y0_pre, y1_pre, te_pre)`` tuple from a forward
    pass already run with the current parameters.
    """
    if pre is None:
        z = net.represent(batch.x)
        pre = (z, *net.pre_estimate(z))
    z, y0p, y1p, te = pre
    if v_mode == "uniform" or not centroids.initialized:
        v = Value(uniform_v(centroids.K)(batch.t))
    elif cfg.v_grad:
        v = _differentiable_v(te, centroids)
    else:
        v = Value(clustering.soft_probabilities(centroids, te.data.reshape(-1)))
    tcol = batch.t.reshape(-1, 1).astype(np.float64)
    y0, y1, t_hat = net.predict_with_subgroups(z, v)
    pre_f = nn.add(nn.mul(y1p, tcol), nn.mul(y0p, 1.0 - tcol))
    post_f = nn.add(nn.mul(y1, tcol), nn.mul(y0, 1.0 - tcol))
    l_t = nn.bce_loss(t_hat, batch.t)
    l_pre = nn.mse_loss(pre_f, batch.y)
    l_post = nn.mse_loss(post_f, batch.y)
    total = nn.add(nn.add(nn.scale(l_t, cfg.alpha), nn.scale(l_pre, cfg.beta)),
                   nn.scale(l_post, cfg.gamma))
    comps = LossComponents(float(l_t.data), float(l_pre.data), float(l_post.data), float(total.data))
    return total, comps


def m_step(net: SubgroupTENet, centroids: CentroidSet, batch: Batch, cfg: TrainConfig,
           batch_index: int = 0, v_mode: str = "subgroup", pre=None,
           lr: float | None = None) -> LossComponents:
    """One SGD step on ``alpha L_t + beta L_pre + gamma L_post`` with centroids frozen."""
    total, comps = compute_losses(net, centroids, batch, cfg, v_mode, pre)
    if not all(math.isfinite(c) for c in comps):
        raise NumericalError(f"non-finite loss at batch {batch_index}: {comps._asdict()}")
    net.params.zero_grad()
    total.backward()
    nn.sgd_step(net.params, cfg.lr if lr is None else lr)
    return comps


def _pretrain_losses(net: SubgroupTENet, batch: Batch) -> tuple[Value, LossComponents]:
    z = net.represent(batch.x)
    y0p, y1p, _ = net.pre_estimate(z)
    tcol = batch.t.reshape(-1, 1).astype(np.float64)
    l_pre = nn.mse_loss(nn.add(nn.mul(y1p, tcol), nn.mul(y0p, 1.0 - tcol)), batch.y)
    return l_pre, LossComponents(0.0, float(l_pre.data), 0.0, float(l_pre.data))


@dataclass
class TrainResult:
    net: SubgroupTENet
    centroids: CentroidSet
    trace: list[EpochTrace]
    config: TrainConfig
    standardizer: Standardizer
    y_scaler: OutcomeScaler
    best_epoch: int = -1
    pretrain_trace: list[EpochTrace] = field(default_factory=list)
    centroid_digests: list[str] = field(default_factory=list)

    def predict(self, X) -> dict[str, np.ndarray]:
        """Outcome predictions in original units plus ``te_pre``, ``v`` and labels."""
        out = self.net.predict(self.standardizer.transform(X), subgroup_v(self.centroids))
        out["y0"] = self.y_scaler.inverse(out["y0"])
        out["y1"] = self.y_scaler.inverse(out["y1"])
        out["te"] = out["y1"] - out["y0"]
        if self.centroids.initialized:
            out["label"] = clustering.hard_assign(self.centroids.mu, out["te_pre"])
        else:
            out["label"] = np.zeros(len(out["te_pre"]), dtype=np.int64)
        return out

    def evaluate(self, data: Dataset):
        pred = self.predict(data.X)
        mu = self.centroids.mu if self.centroids.initialized else np.zeros(self.centroids.K)
        return evaluate(pred["y0"], pred["y1"], pred["te_pre"], mu, data.mu0, data.mu1,
                        data.y, data.t)


class Trainer:
    """Holds the mutable training state for one run."""

    def __init__(self, train: Dataset, dev: Dataset | None, cfg: TrainConfig):
        if cfg.K > len(train):
            raise ConfigurationError(f"K={cfg.K} exceeds the training size {len(train)}")
        self.cfg = cfg
        self.rng = RngStream(cfg.seed)
        self.standardizer = Standardizer.fit(train.X)
        self.y_scaler = OutcomeScaler.fit(train.y) if cfg.scale_outcomes else OutcomeScaler()
        self.X = self.standardizer.transform(train.X)
        self.t = train.t
        self.y = self.y_scaler.transform(train.y)
        self.dev = dev
        self.net = SubgroupTENet(cfg.model_config(train.p), self.rng.child("init"), cfg.lr)
        self.centroids = CentroidSet(np.zeros(cfg.K), 1.0, False)
        self._shuffle = self.rng.child("shuffle")
        self._kmeans = self.rng.child("kmeans")
        self.centroid_digests: list[str] = []
        self.lr = cfg.lr

    def batches(self):
        perm = self._shuffle.permutation(len(self.X))
        bs = self.cfg.batch_size
        for s in range(0, len(perm), bs):
            idx = perm[s:s + bs]
            yield Batch(self.X[idx], self.t[idx], self.y[idx])

    def result(self, trace, best_epoch=-1, pretrain_trace=()) -> TrainResult:
        return TrainResult(self.net, self.centroids, list(trace), self.cfg, self.standardizer,
                           self.y_scaler, best_epoch, list(pretrain_trace), self.centroid_digests)

    def dev_trace(self, epoch: int, comps: list[LossComponents]) -> EpochTrace:
        l_t, l_pre, l_post = (float(np.mean([c[i] for c in comps])) if comps else 0.0 for i in range(3))
        if self.dev is None or len(self.dev) == 0:
            return EpochTrace(epoch, l_t, l_pre, l_post, None, None, None)
        rep = self.result([]).evaluate(self.dev)
        return EpochTrace(epoch, l_t, l_pre, l_post, rep.pehe, rep.v_within, rep.v_across,
                          rep.factual_mse)

    def run_epochs(self, epochs: int, step) -> tuple[list[EpochTrace], int]:
        """Run ``step(batch_index, batch)`` over shuffled batches with dev-MSE early stopping.

        Restores the best parameters and centroids at the end.
        """
        trace: list[EpochTrace] = []
        best = (math.inf, -1, self.net.params.state(), self.centroids.copy())
        stale = 0
        for epoch in range(epochs):
            self.lr = self.cfg.lr_at(epoch, epochs)
            comps = [step(i, b) for i, b in enumerate(self.batches())]
            tr = self.dev_trace(epoch, comps)
            trace.append(tr)
            score = tr.dev_mse if math.isfinite(tr.dev_mse) else tr.l_post
            if score < best[0]:
                best = (score, epoch, self.net.params.state(), self.centroids.copy())
                stale = 0
            else:
                stale += 1
                if self.cfg.patience and stale >= self.cfg.patience:
                    break
        if best[1] >= 0:
            self.net.params.load_state(best[2])
            self.centroids = best[3]
        return trace, best[1]

    def em_step(self, i: int, batch: Batch) -> LossComponents:
        # one forward serves both steps: the E-step does not touch the weights
        z = self.net.represent(batch.x)
        pre = (z, *self.net.pre_estimate(z))
        te = pre[3].data.reshape(-1)
        self.centroids = e_step(self.net, self.centroids, batch, self._kmeans, te_pre=te)
        self.centroid_digests.append(self.centroids.digest())
        return m_step(self.net, self.centroids, batch, self.cfg, i, pre=pre, lr=self.lr)

    def frozen_step(self, i: int, batch: Batch) -> LossComponents:
        return m_step(self.net, self.centroids, batch, self.cfg, i, lr=self.lr)

    def pretrain_step(self, i: int, batch: Batch) -> LossComponents:
        loss, comps = _pretrain_losses(self.net, batch)
        if not math.isfinite(comps.total):
            raise NumericalError(f"non-finite pre-training loss at batch {i}")
        self.net.params.zero_grad()
        loss.backward()
        nn.sgd_step(self.net.params, self.lr)
        return comps

    def fit_centroids_once(self):
        te = self.net.predict(self.X, uniform_v(self.cfg.K))["te_pre"]
        self.centroids = clustering.fit_full_batch(te, self.cfg.K, self._kmeans)


def train(train_data: Dataset, dev_data: Dataset | None, cfg: TrainConfig) -> TrainResult:
    """Train in ``cfg.mode``; the returned model holds the best-dev-MSE weights."""
    tr = Trainer(train_data, dev_data, cfg)
    if cfg.mode == "full":
        trace, best = tr.run_epochs(cfg.epochs, tr.em_step)
        return tr.result(trace, best)
    return _train_ablation(tr)


def train_ablation(train_data: Dataset, dev_data: Dataset | None, cfg: TrainConfig) -> TrainResult:
    if cfg.mode not in ("O", "P"):
        raise ConfigurationError("train_ablation needs mode 'O' or 'P'")
    return train(train_data, dev_data, cfg)


def _train_ablation(tr: Trainer) -> TrainResult:
    cfg = tr.cfg
    pre_trace, _ = tr.run_epochs(cfg.pretrain_epochs, tr.pretrain_step)
    if cfg.mode == "O":
        tr.fit_centroids_once()
        trace, best = tr.run_epochs(cfg.epochs, tr.frozen_step)
    else:
        trace, best = tr.run_epochs(cfg.epochs, tr.em_step)
    return tr.result(trace, best, pre_trace)


def select_k(train_data: Dataset, dev_data: Dataset, cfg: TrainConfig, ks=range(1, 11)):
    """Train one model per K; pick the lowest dev factual MSE.

    Returns ``(best_k, {k: TrainResult})``.
    """
    results = {}
    for k in ks:
        c = TrainConfig(**{**asdict(cfg), "K": k})
        results[k] = train(train_data, dev_data, c)
    scores = {k: r.evaluate(dev_data).factual_mse for k, r in results.items()}
    best_k = min(scores, key=lambda k: (scores[k], k))
    return best_k, results


def write_trace_csv(trace: list[EpochTrace], path) -> None:
    def cell(v):
        return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for tr in trace:
            w.writerow([cell(getattr(tr, c)) for c in TRACE_COLUMNS])
