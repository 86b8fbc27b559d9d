"""Small reverse-mode autodiff over numpy arrays.

Only the pieces the SubgroupTE network needs are here: dense layers,
per-feature token embeddings, multi-head self-attention, ReLU/sigmoid,
mean pooling, MSE and binary cross-entropy, and a plain SGD updater.

Every differentiable quantity is a :class:`Value` holding a float64 array
(``data``) and, after :meth:`Value.backward`, a gradient of the same shape.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

EPS = 1e-7


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer or model was configured inconsistently."""


class StateError(RuntimeError):
    """An operation was called in the wrong state (e.g. no gradients yet)."""


class RngStream:
    """Seeded random stream.

    Wraps a PCG64 generator so identical seeds give identical draws on any
    platform. ``child(key)`` derives an independent stream from a string key,
    which keeps sub-streams stable when unrelated draws are added elsewhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: str) -> "RngStream":
        ss = np.random.SeedSequence([self.seed, zlib.crc32(key.encode("utf-8"))])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))

    def _tick(self):
        self.counter += 1
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._tick().uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._tick().normal(loc, scale, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._tick().choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self._tick().permutation(n)

    def integers(self, low, high=None, size=None):
        return self._tick().integers(low, high, size)

    def random(self, size=None):
        return self._tick().random(size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"


class Value:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name", "requires_grad")

    def __init__(self, data, parents: Sequence["Value"] = (), backward: Callable | None = None,
                 name: str | None = None, requires_grad: bool | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        # constants never propagate, so drop their graph links
        self._parents = tuple(parents) if requires_grad else ()
        self._backward = backward if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        # never mutate in place: backward closures may hand the same array to several parents
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this node. Scalars default to a unit seed."""
        if not self.requires_grad:
            raise StateError("backward() on a value that does not depend on any parameter")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Value] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed after propagation
                if node._parents:
                    node.grad = None if node is not self else node.grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Value(a.data + b.data, (a, b), backward)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Value(a.data - b.data, (a, b), backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Value(a.data * b.data, (a, b), backward)


def scale(a: Value, c: float) -> Value:
    def backward(g):
        a._accumulate(g * c)

    return Value(a.data * c, (a,), backward)


def matmul(a, b) -> Value:
    """Batched matrix product; a 2-D right operand is shared across the batch."""
    a, b = as_value(a), as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # fold the batch into rows: one GEMM instead of N small ones
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return Value(out, (a, b), backward)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Value(a.data @ b.data, (a, b), backward)


def relu(a: Value) -> Value:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return Value(a.data * mask, (a,), backward)


def absolute(a: Value) -> Value:
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign)

    return Value(np.abs(a.data), (a,), backward)


def sigmoid(a: Value) -> Value:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return Value(out, (a,), backward)


def softmax(a: Value, axis: int = -1) -> Value:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Value(out, (a,), backward)


def mean(a: Value, axis: int) -> Value:
    n = a.shape[axis]

    def backward(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    return Value(a.data.mean(axis=axis), (a,), backward)


def reshape(a: Value, shape: tuple) -> Value:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Value(a.data.reshape(shape), (a,), backward)


def transpose(a: Value, axes: tuple) -> Value:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return Value(a.data.transpose(axes), (a,), backward)


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for v, part in zip(values, np.split(g, splits, axis=axis)):
            v._accumulate(part)

    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return Value(data, values, backward)


def dense_forward(x, weights: Value, bias: Value) -> Value:
    """``x @ W + b`` with the bias broadcast over rows."""
    x = as_value(x)
    if x.shape[-1] != weights.shape[0] or bias.shape[-1] != weights.shape[1]:
        raise DimensionError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return add(matmul(x, weights), bias)


def split_heads(x: Value, heads: int) -> Value:
    *lead, L, d = x.shape
    return transpose(reshape(x, (*lead, L, heads, d // heads)),
                     tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))


def merge_heads(x: Value) -> Value:
    *lead, h, L, dh = x.shape
    n = len(lead)
    moved = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(moved, (*lead, L, h * dh))


def attention_weights(q: Value, k: Value) -> Value:
    dh = q.shape[-1]
    scores = scale(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))),
                   1.0 / np.sqrt(dh))
    return softmax(scores, axis=-1)


def self_attention_forward(tokens, params: "AttentionParams", heads: int,
                           return_weights: bool = False):
    """Multi-head scaled dot-product self-attention.

    ``tokens`` is ``[L, d]`` or batched ``[N, L, d]``. Output has the same
    shape; with ``return_weights`` the per-head attention matrices
    (``[..., heads, L, L]``) are returned too.
    """
    tokens = as_value(tokens)
    d = tokens.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    q = split_heads(dense_forward(tokens, params.wq, params.bq), heads)
    k = split_heads(dense_forward(tokens, params.wk, params.bk), heads)
    v = split_heads(dense_forward(tokens, params.wv, params.bv), heads)
    attn = attention_weights(q, k)
    out = dense_forward(merge_heads(matmul(attn, v)), params.wo, params.bo)
    return (out, attn) if return_weights else out


def mse_loss(pred: Value, target) -> Value:
    """Mean squared error; gradient ``2 (pred - target) / N``."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    p = pred.data.reshape(-1)
    if p.shape != target.shape:
        raise DimensionError(f"mse: {p.shape[0]} predictions vs {target.shape[0]} targets")
    n = max(len(p), 1)
    resid = p - target

    def backward(g):
        pred._accumulate((g * 2.0 * resid / n).reshape(pred.shape))

    return Value(np.dot(resid, resid) / n, (pred,), backward)


def bce_loss(prob: Value, target) -> Value:
    """Mean binary cross-entropy with both class terms, probabilities clamped to [EPS, 1-EPS]."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    p_raw = prob.data.reshape(-1)
    if p_raw.shape != target.shape:
        raise DimensionError(f"bce: {p_raw.shape[0]} probabilities vs {target.shape[0]} targets")
    n = max(len(p_raw), 1)
    p = np.clip(p_raw, EPS, 1.0 - EPS)
    inside = (p_raw >= EPS) & (p_raw <= 1.0 - EPS)
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).sum() / n

    def backward(g):
        dp = (-(target / p) + (1.0 - target) / (1.0 - p)) / n
        prob._accumulate((g * dp * inside).reshape(prob.shape))

    return Value(loss, (prob,), backward)


class ParamStore:
    """Named learnable parameters plus the SGD learning rate."""

    def __init__(self, lr: float = 0.001):
        self.lr = lr
        self._params: OrderedDict[str, Value] = OrderedDict()

    def add(self, name: str, data) -> Value:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        v = Value(np.array(data, dtype=np.float64), name=name, requires_grad=True)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Value]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Value]]:
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise DimensionError(f"parameter {k!r}: expected {v.shape}, got {arr.shape}")
            v.data = arr.copy()

    def digest(self) -> str:
        """Content hash over names, shapes and raw bytes of every parameter."""
        import hashlib

        h = hashlib.sha256()
        for k, v in self._params.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()


def sgd_step(params: ParamStore, lr: float | None = None) -> ParamStore:
    """In-place ``theta -= lr * grad`` followed by zeroing the gradients."""
    lr = params.lr if lr is None else lr
    missing = [k for k, v in params.items() if v.grad is None]
    if missing:
        raise StateError(f"no gradient for parameters: {', '.join(missing)}")
    for p in params:
        p.data -= lr * p.grad
        p.grad = np.zeros_like(p.data)
    return params


def init_uniform(rng: RngStream, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class AttentionParams:
    """Projection weights of one multi-head attention layer."""

    def __init__(self, store: ParamStore, prefix: str, d: int, rng: RngStream):
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", store.add(f"{prefix}.w{name}", init_uniform(rng, d, (d, d))))
            setattr(self, f"b{name}", store.add(f"{prefix}.b{name}", init_uniform(rng, d, (1, d))))


class Dense:
    """A single affine layer stored in a ParamStore."""

    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_out: int, rng: RngStream):
        self.w = store.add(f"{prefix}.w", init_uniform(rng, n_in, (n_in, n_out)))
        self.b = store.add(f"{prefix}.b", init_uniform(rng, n_in, (1, n_out)))

    def __call__(self, x) -> Value:
        return dense_forward(x, self.w, self.b)
