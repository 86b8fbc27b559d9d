import math

import numpy as np
import pytest

from subgroupte import nn
from subgroupte.clustering import CentroidSet
from subgroupte.data import generate_synthetic, split_6_2_2
from subgroupte.model import SubgroupTENet
from subgroupte.nn import ConfigurationError, RngStream
from subgroupte.training import (
    TRACE_COLUMNS, Batch, NumericalError, TrainConfig, compute_losses, e_step, m_step, select_k,
    train, train_ablation, write_trace_csv,
)

SMALL = dict(hidden=8, d=8, heads=2, batch_size=16, patience=0)


def small_net(K=3, p=4, seed=0):
    cfg = TrainConfig(K=K, **SMALL)
    return SubgroupTENet(cfg.model_config(p), RngStream(seed)), cfg


def small_batch(n=12, p=4, seed=0, t=None):
    g = np.random.default_rng(seed)
    t = g.integers(0, 2, n) if t is None else np.asarray(t)
    return Batch(g.normal(size=(n, p)), t, g.normal(size=n))


@pytest.fixture(scope="module")
def tiny_data():
    ds = generate_synthetic(40, 40, 4, RngStream(0))
    tr, dv, te = split_6_2_2(ds, RngStream(1))
    return ds.subset(tr), ds.subset(dv), ds.subset(te)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(gamma=-0.1), dict(K=0), dict(batch_size=0),
                                    dict(mode="Q"), dict(epochs=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            TrainConfig.from_dict({"lr": 0.1, "momentum": 0.9})

    def test_cosine_schedule(self):
        cfg = TrainConfig(lr=0.1, lr_schedule="cosine", min_lr_frac=0.1)
        assert cfg.lr_at(0, 10) == pytest.approx(0.1)
        assert cfg.lr_at(5, 10) == pytest.approx(0.055)
        assert TrainConfig(lr=0.1).lr_at(7, 10) == 0.1


class TestEStep:
    def test_lazy_init_then_update(self):
        net, _ = small_net()
        cs = e_step(net, CentroidSet(np.zeros(3), 1.0, False), small_batch(), RngStream(0))
        assert cs.initialized and cs.K == 3 and np.isfinite(cs.mu).all()

    def test_parameters_frozen(self):
        net, _ = small_net()
        before = net.params.digest()
        cs = e_step(net, CentroidSet(np.zeros(3), 1.0, False), small_batch(), RngStream(0))
        e_step(net, cs, small_batch(seed=1), RngStream(0))
        assert net.params.digest() == before

    def test_fixed_point(self):
        net, _ = small_net(K=2)
        te = np.array([0.0, 0.0, 10.0, 10.0])
        cs = CentroidSet(np.array([0.0, 10.0]), 1.0, True)
        out = e_step(net, cs, small_batch(4), RngStream(0), te_pre=te)
        np.testing.assert_array_equal(out.mu, [0.0, 10.0])


class TestMStep:
    def test_centroids_frozen(self):
        net, cfg = small_net()
        cs = CentroidSet(np.array([-1.0, 0.0, 1.0]), 0.5, True)
        before = cs.digest()
        m_step(net, cs, small_batch(), cfg)
        assert cs.digest() == before

    def test_zero_weights_no_change(self):
        net, _ = small_net()
        cfg = TrainConfig(alpha=0, beta=0, gamma=0, K=3, **SMALL)
        before = net.params.digest()
        comps = m_step(net, CentroidSet(np.array([-1.0, 0.0, 1.0]), 0.5, True), small_batch(), cfg)
        assert comps.total == 0.0
        assert net.params.digest() == before

    @pytest.mark.parametrize("w", [(1, 1, 1), (0.3, 0.7, 0.2), (0, 0.5, 1)])
    def test_loss_decomposition(self, w):
        net, _ = small_net()
        cfg = TrainConfig(alpha=w[0], beta=w[1], gamma=w[2], K=3, **SMALL)
        _, c = compute_losses(net, CentroidSet(np.array([-1.0, 0.0, 1.0]), 0.5, True), small_batch(), cfg)
        assert abs(c.total - (w[0] * c.l_t + w[1] * c.l_pre + w[2] * c.l_post)) < 1e-12

    def _grads(self, cfg, t):
        net, _ = small_net()
        cs = CentroidSet(np.array([-1.0, 0.0, 1.0]), 0.5, True)
        total, _ = compute_losses(net, cs, small_batch(t=t), cfg)
        net.params.zero_grad()
        total.backward()
        return {k: v.grad for k, v in net.params.items()}

    def test_factual_masking(self):
        cfg = TrainConfig(alpha=0, beta=1, gamma=1, K=3, **SMALL)
        g = self._grads(cfg, np.ones(12, dtype=int))
        for name in ("p_y0.w", "p_y0.b", "f_y0.l1.w", "f_y0.l2.w", "f_y0.l2.b"):
            assert not g[name].any(), name
        assert g["p_y1.w"].any() and g["f_y1.l2.w"].any()
        g = self._grads(cfg, np.zeros(12, dtype=int))
        assert not g["p_y1.w"].any() and not g["f_y1.l1.w"].any()

    def test_post_only_leaves_pre_heads(self):
        cfg = TrainConfig(alpha=0, beta=0, gamma=1, K=3, **SMALL)
        g = self._grads(cfg, None)
        for name in ("p_y0.w", "p_y0.b", "p_y1.w", "p_y1.b", "f_t.l2.w"):
            assert not g[name].any(), name
        assert g["embed.w"].any()

    def test_post_only_with_v_gradient(self):
        cfg = TrainConfig(alpha=0, beta=0, gamma=1, K=3, v_grad=True, **SMALL)
        g = self._grads(cfg, None)
        assert g["p_y1.w"].any()

    def test_non_finite_loss(self):
        net, cfg = small_net()
        b = small_batch()
        b = Batch(b.x, b.t, np.full(len(b.y), np.nan))
        with pytest.raises(NumericalError, match="batch 7"):
            m_step(net, CentroidSet(np.zeros(3), 1.0, True), b, cfg, batch_index=7)


class TestTrain:
    def test_zero_epochs(self, tiny_data):
        tr, dv, _ = tiny_data
        res = train(tr, dv, TrainConfig(epochs=0, K=2, **SMALL))
        assert res.trace == [] and not res.centroids.initialized
        pred = res.predict(dv.X)
        assert np.isfinite(pred["te"]).all()

    def test_deterministic(self, tiny_data):
        tr, dv, _ = tiny_data
        cfg = TrainConfig(epochs=3, K=2, lr=0.05, **SMALL)
        a, b = train(tr, dv, cfg), train(tr, dv, cfg)
        assert a.trace == b.trace
        assert a.net.params.digest() == b.net.params.digest()
        assert a.centroid_digests == b.centroid_digests

    def test_trace_finite(self, tiny_data):
        tr, dv, _ = tiny_data
        res = train(tr, dv, TrainConfig(epochs=3, K=2, lr=0.05, **SMALL))
        assert len(res.trace) == 3
        for row in res.trace:
            assert all(math.isfinite(getattr(row, c)) for c in TRACE_COLUMNS)

    def test_k_too_large(self, tiny_data):
        tr, dv, _ = tiny_data
        with pytest.raises(ConfigurationError):
            train(tr.subset(np.arange(3)), dv, TrainConfig(K=4, **SMALL))

    def test_early_stopping(self, tiny_data):
        tr, dv, _ = tiny_data
        cfg = TrainConfig(**{**SMALL, "epochs": 40, "K": 2, "lr": 0.1, "patience": 2})
        res = train(tr, dv, cfg)
        assert len(res.trace) < 40
        assert res.best_epoch == int(np.argmin([r.dev_mse for r in res.trace]))

    def test_mode_o_centroids_frozen(self, tiny_data):
        tr, dv, _ = tiny_data
        res = train_ablation(tr, dv, TrainConfig(mode="O", epochs=2, pretrain_epochs=2, K=2, **SMALL))
        assert res.centroid_digests == []
        assert res.centroids.initialized
        assert len(res.pretrain_trace) == 2 and len(res.trace) == 2

    def test_mode_p_runs_em(self, tiny_data):
        tr, dv, _ = tiny_data
        res = train_ablation(tr, dv, TrainConfig(mode="P", epochs=2, pretrain_epochs=1, K=2, **SMALL))
        assert len(res.centroid_digests) == 2 * math.ceil(len(tr) / SMALL["batch_size"])

    def test_ablation_requires_mode(self, tiny_data):
        tr, dv, _ = tiny_data
        with pytest.raises(ConfigurationError):
            train_ablation(tr, dv, TrainConfig(**SMALL))

    def test_select_k(self, tiny_data):
        tr, dv, _ = tiny_data
        k, results = select_k(tr, dv, TrainConfig(epochs=1, **SMALL), ks=(1, 2))
        assert k in (1, 2) and set(results) == {1, 2}

    def test_trace_csv(self, tiny_data, tmp_path):
        tr, dv, _ = tiny_data
        res = train(tr, dv, TrainConfig(epochs=2, K=2, **SMALL))
        path = tmp_path / "trace.csv"
        write_trace_csv(res.trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,l_t,l_pre,l_post,dev_pehe,v_within,v_across"
        assert len(lines) == 3 and lines[1].startswith("0,")
