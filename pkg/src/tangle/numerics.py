"""Dense tensors with reverse-mode automatic differentiation.

Storage and elementwise/BLAS arithmetic are delegated to numpy; graph
construction, gradient rules and the backward sweep live here.  Every
operation returns a new :class:`Tensor` whose ``_backward`` closure maps the
upstream gradient to one gradient per parent.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, ndtr

from .errors import ContractError, DimensionError, NumericalError, ParameterError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype) if np.ndim(x) == 0 else np.asarray(x, like.dtype))


def _node(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=parents if needs else (),
                  backward=backward if needs else None)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _node(A @ B, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _node(out, "reshape", (a,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a length-n row bias for an m×n ``a``."""
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _node(a.data + b.data, "add_bias", (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _node(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * g.dtype.type(c),))


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,),
                 lambda g: (np.full(shape, g, dtype=a.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _node(np.asarray(a.data.mean(), dtype=a.dtype), "mean", (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def diag(a: Tensor) -> Tensor:
    """Main diagonal of a square matrix as a vector."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diag expects a square matrix, got {a.shape}")
    n = a.shape[0]

    def backward(g):
        out = np.zeros((n, n), dtype=g.dtype)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _node(np.diagonal(a.data).copy(), "diag", (a,), backward)


def norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm of each row; the subgradient at a zero row is taken as zero."""
    X = x.data
    n = np.sqrt((X * X).sum(axis=1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[:, None], X / safe[:, None], 0.0) * g[:, None],)

    return _node(n, "norm_rows", (x,), backward)


def sum_rows(x: Tensor) -> Tensor:
    cols = x.shape[1]
    return _node(x.data.sum(axis=1), "sum_rows", (x,),
                 lambda g: (np.repeat(g[:, None], cols, axis=1),))


# ---------------------------------------------------------------- elementwise

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    X = x.data
    cdf = ndtr(X).astype(X.dtype)

    def backward(g):
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * X * X)).astype(X.dtype)
        return (g * (cdf + X * pdf),)

    return _node(X * cdf, "gelu", (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    X = x.data
    return _node(np.log(X), "log", (x,), lambda g: (g / X,))


def absolute(x: Tensor) -> Tensor:
    X = x.data
    return _node(np.abs(X), "abs", (x,), lambda g: (g * np.sign(X),))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _node(X * X, "square", (x,), lambda g: (2.0 * g * X,))


# ---------------------------------------------------------------- normalisation

def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature scale tau must be positive, got {tau}")


def softmax_rows(x: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``tau * x`` (max-subtracted)."""
    _check_tau(tau)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data * x.dtype.type(tau)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (tau * y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _node(y, "softmax_rows", (x,), backward)


def log_softmax_rows(x: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise log-softmax of ``tau * x``."""
    _check_tau(tau)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a matrix, got {x.shape}")
    z = x.data * x.dtype.type(tau)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (tau * (g - p * g.sum(axis=1, keepdims=True)),)

    return _node(y, "log_softmax_rows", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    X = x.data
    if X.ndim != 2 or gamma.shape != (X.shape[1],) or beta.shape != (X.shape[1],):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = X.shape[1]
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        dxhat = g * G
        dx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * G + beta.data, "layer_norm", (x, gamma, beta), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Scale each row to unit Euclidean norm.

    Rows whose norm falls below ``eps`` are divided by ``eps`` instead (a zero
    row stays zero); the returned boolean mask flags them.
    """
    if not eps > 0:
        raise ParameterError(f"l2_normalize_rows eps must be positive, got {eps}")
    X = x.data
    n = np.sqrt((X * X).sum(axis=1, keepdims=True))
    degenerate = (n < eps)[:, 0]
    d = np.maximum(n, eps)
    y = X / d

    def backward(g):
        proj = np.where(degenerate[:, None], 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - y * proj) / d,)

    return _node(y, "l2_normalize_rows", (x,), backward), degenerate


# ---------------------------------------------------------------- bag (segment) ops

def _segment_layout(starts: np.ndarray, total: int) -> np.ndarray:
    counts = np.diff(np.append(starts, total))
    if len(starts) == 0 or starts[0] != 0 or np.any(counts <= 0):
        raise DimensionError("bag offsets must start at 0 and describe non-empty bags")
    return counts


def segment_softmax(scores: Tensor, starts: np.ndarray) -> Tensor:
    """Softmax of a flat score vector within each bag ``[starts[b], starts[b+1])``."""
    s = scores.data
    if s.ndim != 1:
        raise DimensionError(f"segment_softmax expects a vector, got {scores.shape}")
    counts = _segment_layout(starts, s.shape[0])
    m = np.repeat(np.maximum.reduceat(s, starts), counts)
    e = np.exp(s - m)
    a = e / np.repeat(np.add.reduceat(e, starts), counts)

    def backward(g):
        inner = np.repeat(np.add.reduceat(a * g, starts), counts)
        return (a * (g - inner),)

    return _node(a, "segment_softmax", (scores,), backward)


def segment_weighted_sum(weights: Tensor, values: Tensor, starts: np.ndarray) -> Tensor:
    """Per-bag ``Σ_k w_k v_k`` over rows of ``values``; returns bags × dim."""
    w, V = weights.data, values.data
    if w.ndim != 1 or V.ndim != 2 or w.shape[0] != V.shape[0]:
        raise DimensionError(f"segment_weighted_sum: weights {weights.shape}, values {values.shape}")
    counts = _segment_layout(starts, V.shape[0])
    out = np.add.reduceat(w[:, None] * V, starts, axis=0)

    def backward(g):
        gr = np.repeat(g, counts, axis=0)
        return (gr * V).sum(axis=1), w[:, None] * gr

    return _node(out, "segment_weighted_sum", (weights, values), backward)


def rng_stream(*key: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ParameterError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _node(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- backward pass

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Populate ``.grad`` on every reachable leaf with ``requires_grad``.

    If ``wrt`` is given, returns their gradients in order; leaves the loss does
    not depend on get zeros.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def check_finite(root: Tensor) -> None:
    """Raise NumericalError naming the first graph node with a non-finite value."""
    for node in _topological(root):
        if not np.all(np.isfinite(node.data)):
            raise NumericalError(f"non-finite value produced by node {node.op!r} with shape {node.shape}")


def grad_check(function: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray],
               step: float = 1e-5) -> float:
    """Max relative discrepancy between backprop and central differences.

    ``function`` builds a scalar graph from a list of float64 leaf tensors.
    The error for each element is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in base]
    out = function(leaves)
    check_finite(out)
    analytic = backward(out, leaves)

    def evaluate(values):
        return float(function([Tensor(v) for v in values]).data)

    worst = 0.0
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            plus = evaluate(base)
            flat[j] = orig - step
            minus = evaluate(base)
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * step)
            if not math.isfinite(numeric):
                raise NumericalError(f"non-finite finite-difference value for parameter {i}, element {j}")
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
    return worst
