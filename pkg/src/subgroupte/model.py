"""The SubgroupTE network.

``represent`` turns each covariate into a token (value times a learned
vector plus a learned offset), runs the tokens through self-attention
encoder blocks and mean-pools them into ``z``. Two one-layer heads give
pre-subgrouping outcomes whose difference is the effect used for
clustering. Three two-layer heads read ``concat(v, z)`` and produce the
final outcomes and the propensity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .nn import AttentionParams, ConfigurationError, Dense, DimensionError, ParamStore, RngStream, Value

HIDDEN_CHOICES = (50, 100, 200, 300)
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    p: int
    d: int = 32
    heads: int = 2
    encoder_layers: int = 1
    hidden: int = 100
    K: int = 4
    ff_mult: int = 2

    def __post_init__(self):
        if self.p < 1:
            raise ConfigurationError("p must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.hidden < 1 or self.encoder_layers < 0:
            raise ConfigurationError("hidden must be >= 1 and encoder_layers >= 0")


class ForwardOutputs(NamedTuple):
    z: Value
    y0_pre: Value
    y1_pre: Value
    te_pre: Value
    v: Value | None = None
    y0_post: Value | None = None
    y1_post: Value | None = None
    t_hat: Value | None = None


class _Head:
    def __init__(self, store, prefix, n_in, hidden, rng):
        self.l1 = Dense(store, f"{prefix}.l1", n_in, hidden, rng)
        self.l2 = Dense(store, f"{prefix}.l2", hidden, 1, rng)

    def __call__(self, x):
        return self.l2(nn.relu(self.l1(x)))


class SubgroupTENet:
    def __init__(self, config: ModelConfig, rng: RngStream, lr: float = 0.001):
        self.config = c = config
        self.params = store = ParamStore(lr)
        self.embed_w = store.add("embed.w", rng.uniform(-1.0, 1.0, size=(1, c.p, c.d)))
        self.embed_b = store.add("embed.b", rng.uniform(-1.0, 1.0, size=(1, c.p, c.d)))
        self.blocks = []
        for i in range(c.encoder_layers):
            attn = AttentionParams(store, f"enc{i}.attn", c.d, rng)
            ff1 = Dense(store, f"enc{i}.ff1", c.d, c.ff_mult * c.d, rng)
            ff2 = Dense(store, f"enc{i}.ff2", c.ff_mult * c.d, c.d, rng)
            self.blocks.append((attn, ff1, ff2))
        self.p_y0 = Dense(store, "p_y0", c.d, 1, rng)
        self.p_y1 = Dense(store, "p_y1", c.d, 1, rng)
        self.f_y0 = _Head(store, "f_y0", c.K + c.d, c.hidden, rng)
        self.f_y1 = _Head(store, "f_y1", c.K + c.d, c.hidden, rng)
        self.f_t = _Head(store, "f_t", c.K + c.d, c.hidden, rng)

    def represent(self, x) -> Value:
        x = nn.as_value(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.p or x.shape[0] == 0:
            raise DimensionError(f"expected a non-empty [N, {self.config.p}] batch, got {x.shape}")
        tokens = nn.add(nn.mul(nn.reshape(x, (*x.shape, 1)), self.embed_w), self.embed_b)
        for attn, ff1, ff2 in self.blocks:
            tokens = nn.add(tokens, nn.self_attention_forward(tokens, attn, self.config.heads))
            tokens = nn.add(tokens, ff2(nn.relu(ff1(tokens))))
        return nn.mean(tokens, axis=1)

    def pre_estimate(self, z: Value) -> tuple[Value, Value, Value]:
        if z.shape[-1] != self.config.d:
            raise DimensionError(f"latent width {z.shape[-1]} != d={self.config.d}")
        y0 = self.p_y0(z)
        y1 = self.p_y1(z)
        return y0, y1, nn.sub(y1, y0)

    def predict_with_subgroups(self, z: Value, v) -> tuple[Value, Value, Value]:
        v = nn.as_value(v)
        if v.data.ndim != 2 or v.shape[1] != self.config.K:
            raise ConfigurationError(f"subgroup matrix width {v.shape} does not match K={self.config.K}")
        h = nn.concat([v, z], axis=1)
        return self.f_y0(h), self.f_y1(h), nn.sigmoid(self.f_t(h))

    def forward(self, x, v_fn=None) -> ForwardOutputs:
        """Full pass. ``v_fn`` maps the detached ``te_pre`` vector to ``[N, K]`` probabilities."""
        z = self.represent(x)
        y0p, y1p, te = self.pre_estimate(z)
        if v_fn is None:
            return ForwardOutputs(z, y0p, y1p, te)
        v = Value(v_fn(te.data.reshape(-1)))
        y0, y1, th = self.predict_with_subgroups(z, v)
        return ForwardOutputs(z, y0p, y1p, te, v, y0, y1, th)

    def predict(self, X, v_fn, batch_size: int = 1024) -> dict[str, np.ndarray]:
        """Inference-only pass; returns flat numpy arrays."""
        parts = []
        for s in range(0, len(X), batch_size):
            out = self.forward(X[s:s + batch_size], v_fn)
            parts.append({
                "y0_pre": out.y0_pre.data.reshape(-1), "y1_pre": out.y1_pre.data.reshape(-1),
                "te_pre": out.te_pre.data.reshape(-1), "v": out.v.data,
                "y0": out.y0_post.data.reshape(-1), "y1": out.y1_post.data.reshape(-1),
                "t_hat": out.t_hat.data.reshape(-1),
            })
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def save_checkpoint(path, net: SubgroupTENet, centroids=None, extra: dict | None = None) -> None:
    """JSON checkpoint: format version, config, centroids and named arrays with shapes."""
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(net.config),
        "centroids": None if centroids is None else centroids.to_dict(),
        "params": {name: {"shape": list(v.shape), "data": [float(a) for a in v.data.reshape(-1)]}
                   for name, v in net.params.items()},
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(net, centroids, extra)``."""
    from .clustering import CentroidSet

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    net = SubgroupTENet(ModelConfig(**doc["config"]), RngStream(0))
    state = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
             for k, v in doc["params"].items()}
    if set(state) != set(net.params.names()):
        raise ConfigurationError("checkpoint parameter names do not match the model")
    net.params.load_state(state)
    cs = None if doc["centroids"] is None else CentroidSet.from_dict(doc["centroids"])
    return net, cs, doc.get("extra", {})
