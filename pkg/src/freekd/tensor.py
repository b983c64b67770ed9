"""Dense 2-D reverse-mode autodiff core.

Everything learnable in the library (GNN weights, policy weights, prompt
tokens, discriminator) lives in `Tensor` leaves; forward ops build a graph
of parent links and `backward` walks it once in reverse topological order.
Gradients accumulate across backward calls; callers zero them between steps.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64

# Flip off only for profiling; every op output is checked when on.
CHECK_FINITE = True


class DimensionError(ValueError):
    """Operand shapes are not conformable for the requested op."""


class NumericError(ArithmeticError):
    """A value became NaN/Inf where finite numbers are required."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


def _as_matrix(values) -> np.ndarray:
    a = np.asarray(values, dtype=DTYPE)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {a.shape}")
    return a


class Tensor:
    """A 2-D value node. Leaves are parameters (needs_grad) or constants."""

    __slots__ = ("values", "grad", "needs_grad", "_parents", "_vjp")

    def __init__(self, values, needs_grad=False, _parents=(), _vjp=None):
        self.values = _as_matrix(values)
        if CHECK_FINITE and not np.isfinite(self.values).all():
            raise NumericError("non-finite values in tensor")
        self.grad = None
        self.needs_grad = needs_grad
        self._parents = _parents
        self._vjp = _vjp

    @classmethod
    def param(cls, values) -> "Tensor":
        return cls(values, needs_grad=True)

    @classmethod
    def const(cls, values) -> "Tensor":
        return cls(values, needs_grad=False)

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on shape {self.values.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), needs_grad=False)

    def zero_grad(self):
        self.grad = None

    def _acc(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, needs_grad={self.needs_grad})"


def _node(values: np.ndarray, parents, vjp) -> Tensor:
    needs = any(p.needs_grad for p in parents)
    if not needs:
        # constant subtrees collapse: no parents retained, nothing to backprop
        return Tensor(values, needs_grad=False)
    return Tensor(values, needs_grad=True, _parents=tuple(parents), _vjp=vjp)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise DimensionError(f"cannot reduce grad {g.shape} to {shape}")
    return out


def backward(loss: Tensor):
    """Populate d(loss)/d(leaf) on every reachable parameter. Scalar loss only."""
    if loss.values.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got {loss.values.shape}")
    # iterative topological order over the needs_grad subgraph
    topo, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.needs_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss._acc(np.ones((1, 1), dtype=DTYPE))
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# ---------------------------------------------------------------------------
# forward ops


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        if a.needs_grad:
            a._acc(g @ bv.T)
        if b.needs_grad:
            b._acc(av.T @ g)

    return _node(av @ bv, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.values + b.values

    def vjp(g):
        if a.needs_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(g, b.shape))

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.values - b.values

    def vjp(g):
        if a.needs_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(-g, b.shape))

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = a.values, b.values

    def vjp(g):
        if a.needs_grad:
            a._acc(_unbroadcast(g * bv, a.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(g * av, b.shape))

    return _node(av * bv, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)

    def vjp(g):
        if a.needs_grad:
            a._acc(g * c)

    return _node(a.values * c, (a,), vjp)


def concat_cols(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols rows {a.shape} vs {b.shape}")
    na = a.shape[1]

    def vjp(g):
        if a.needs_grad:
            a._acc(g[:, :na])
        if b.needs_grad:
            b._acc(g[:, na:])

    return _node(np.hstack([a.values, b.values]), (a, b), vjp)


def concat_rows(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows cols {a.shape} vs {b.shape}")
    na = a.shape[0]

    def vjp(g):
        if a.needs_grad:
            a._acc(g[:na])
        if b.needs_grad:
            b._acc(g[na:])

    return _node(np.vstack([a.values, b.values]), (a, b), vjp)


def transpose(a) -> Tensor:
    a = _t(a)

    def vjp(g):
        if a.needs_grad:
            a._acc(g.T)

    return _node(a.values.T.copy(), (a,), vjp)


def take_rows(a, idx) -> Tensor:
    """Rows a[idx]; repeated indices scatter-add on the way back."""
    a = _t(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError("take_rows index out of range")

    def vjp(g):
        if a.needs_grad:
            buf = np.zeros_like(a.values)
            np.add.at(buf, idx, g)
            a._acc(buf)

    return _node(a.values[idx], (a,), vjp)


def row_softmax(a) -> Tensor:
    a = _t(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        if a.needs_grad:
            a._acc(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _node(s, (a,), vjp)


def row_log_softmax(a) -> Tensor:
    a = _t(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        if a.needs_grad:
            a._acc(g - s * g.sum(axis=1, keepdims=True))

    return _node(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.values > 0

    def vjp(g):
        if a.needs_grad:
            a._acc(g * mask)

    return _node(a.values * mask, (a,), vjp)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _t(a)
    mask = a.values > 0
    coef = np.where(mask, 1.0, slope)

    def vjp(g):
        if a.needs_grad:
            a._acc(g * coef)

    return _node(a.values * coef, (a,), vjp)


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _t(a)
    neg = alpha * (np.exp(np.minimum(a.values, 0.0)) - 1.0)
    out = np.where(a.values > 0, a.values, neg)

    def vjp(g):
        if a.needs_grad:
            a._acc(g * np.where(a.values > 0, 1.0, neg + alpha))

    return _node(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.values)

    def vjp(g):
        if a.needs_grad:
            a._acc(g * (1.0 - out * out))

    return _node(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = 1.0 / (1.0 + np.exp(-a.values))

    def vjp(g):
        if a.needs_grad:
            a._acc(g * out * (1.0 - out))

    return _node(out, (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed overflow-safe; gradient is sigmoid(x)."""
    a = _t(a)
    out = np.maximum(a.values, 0.0) + np.log1p(np.exp(-np.abs(a.values)))

    def vjp(g):
        if a.needs_grad:
            a._acc(g / (1.0 + np.exp(-a.values)))

    return _node(out, (a,), vjp)


def clamped_log(a, eps: float = 1e-12) -> Tensor:
    """log(max(a, eps)); keeps CE/KL finite on vanishing probabilities."""
    a = _t(a)
    clamped = np.maximum(a.values, eps)

    def vjp(g):
        if a.needs_grad:
            a._acc(g * (a.values >= eps) / clamped)

    return _node(np.log(clamped), (a,), vjp)


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    a = _t(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def vjp(g):
        if a.needs_grad:
            a._acc(g * keep)

    return _node(a.values * keep, (a,), vjp)


def mean_rows(a) -> Tensor:
    a = _t(a)
    n = a.shape[0]

    def vjp(g):
        if a.needs_grad:
            a._acc(np.repeat(g, n, axis=0) / n)

    return _node(a.values.mean(axis=0, keepdims=True), (a,), vjp)


def row_sum(a) -> Tensor:
    a = _t(a)

    def vjp(g):
        if a.needs_grad:
            a._acc(np.repeat(g, a.shape[1], axis=1))

    return _node(a.values.sum(axis=1, keepdims=True), (a,), vjp)


def sum_all(a) -> Tensor:
    a = _t(a)

    def vjp(g):
        if a.needs_grad:
            a._acc(np.full(a.shape, g[0, 0]))

    return _node(a.values.sum().reshape(1, 1), (a,), vjp)


def rowwise_cosine(a, b) -> Tensor:
    """Cosine of corresponding rows; a may have one row, broadcast against b.

    A zero row has cosine 0 against anything (and zero gradient there).
    """
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"rowwise_cosine dims {a.shape} vs {b.shape}")
    if a.shape[0] not in (1, b.shape[0]):
        raise DimensionError(f"rowwise_cosine rows {a.shape} vs {b.shape}")
    av = np.broadcast_to(a.values, b.shape)
    bv = b.values
    na = np.linalg.norm(av, axis=1, keepdims=True)
    nb = np.linalg.norm(bv, axis=1, keepdims=True)
    denom = na * nb
    ok = denom > 0
    safe = np.where(ok, denom, 1.0)
    dot = (av * bv).sum(axis=1, keepdims=True)
    cos = np.where(ok, dot / safe, 0.0)

    def vjp(g):
        g = g * ok
        if a.needs_grad:
            ga = g * (bv / safe - cos * av / np.where(na > 0, na * na, 1.0))
            a._acc(_unbroadcast(ga, a.shape))
        if b.needs_grad:
            b._acc(g * (av / safe - cos * bv / np.where(nb > 0, nb * nb, 1.0)))

    return _node(cos, (a, b), vjp)


def cosine(a, b) -> float:
    """Plain cosine similarity of two row vectors (no gradient)."""
    return float(rowwise_cosine(_t(a).detach(), _t(b).detach()).values[0, 0])


# ---------------------------------------------------------------------------
# optimization


class Optimizer:
    """Adam (decoupled weight decay) or a plain gradient step over a parameter list."""

    def __init__(self, params, lr=0.01, kind="adam", weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer kind {kind!r}")
        self.params = list(params)
        self.lr = float(lr)
        self.kind = kind
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if self.kind == "sgd":
                p.values -= self.lr * g
            else:
                m, v = self._m[i], self._v[i]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** self.t)
                vhat = v / (1 - self.beta2 ** self.t)
                p.values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
