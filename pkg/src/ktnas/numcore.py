"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Every model in the package is built from the handful of operations here.
Tensors wrap a numpy array; operations on tensors that require gradients
record a backward closure, and :func:`backward` walks the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# per thread, so concurrent evaluation workers cannot clobber each other's mode
_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation only)."""
    prev = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _grad_buffer(t: Tensor) -> np.ndarray:
    # sparse updates write straight into the gradient array
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 1-D/2-D operands (batched 3-D also accepted)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            else:
                ga = g @ np.swapaxes(bd, -1, -2) if ad.ndim > 1 else g @ bd.T
            _accumulate(a, _unbroadcast(np.asarray(ga), a.shape))
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g) if bd.ndim > 1 else g * ad
            elif bd.ndim == 1:
                gb = ad.T @ g
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
            _accumulate(b, _unbroadcast(np.asarray(gb), b.shape))

    return _node(out_data, (a, b), bw, "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W`` plus an optional bias row."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim == 0 or W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine: input shape {x.shape} does not match weight shape {W.shape}")
    out = matmul(x, W)
    if b is not None:
        if b.shape[-1] != W.shape[1]:
            raise DimensionError(f"affine: bias shape {b.shape} does not match weight shape {W.shape}")
        out = add(out, b)
    return out


def transpose(a: Tensor) -> Tensor:
    out_data = np.swapaxes(a.data, -1, -2)

    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _node(out_data, (a,), bw, "transpose")


# activations

def logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = logistic(x.data)

    def bw(g):
        _accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), bw, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        _accumulate(x, g * mask)

    return _node(out, (x,), bw, "relu")


def identity(x: Tensor) -> Tensor:
    return x


_ACT_FNS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "identity": identity}


def activate(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACT_FNS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}") from None
    return fn(as_tensor(x))


# reductions and reshaping

def tsum(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(np.float64))

    return _node(np.asarray(x.data.sum()), (x,), bw, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accumulate(x, np.full(x.shape, float(g) / n))

    return _node(np.asarray(x.data.mean()), (x,), bw, "mean")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, gp)

    return _node(out_data, parts, bw, "concat")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[..., start:stop]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        _accumulate(x, gx)

    return _node(out_data.copy(), (x,), bw, "slice_cols")


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor as a 1-D tensor."""
    out_data = x.data[:, j].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, j] = g
        _accumulate(x, gx)

    return _node(out_data, (x,), bw, "column")


def mean_of(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors."""
    if len(parts) == 1:
        return parts[0]
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return mul(total, 1.0 / len(parts))


# indexing

def gather_rows(W: Tensor, idx) -> Tensor:
    """Embedding lookup ``W[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = W.data[idx]

    def bw(g):
        if W.requires_grad:
            np.add.at(_grad_buffer(W), idx, g)

    return _node(out_data, (W,), bw, "gather_rows")


def pick(x: Tensor, idx) -> Tensor:
    """Row-wise column selection: ``out[b] = x[b, idx[b]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _accumulate(x, gx)

    return _node(out_data, (x,), bw, "pick")


def bank_affine(x: Tensor, bank: Tensor, idx, bias: Tensor | None = None) -> Tensor:
    """Per-row affine map with the matrix chosen by ``idx``.

    ``out[b] = x[b] @ bank[idx[b]] + bias[idx[b]]``. Rows that select the same
    matrix accumulate into it; matrices no row selects get zero gradient.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or bank.data.ndim != 3 or x.shape[1] != bank.shape[1]:
        raise DimensionError(f"bank_affine: input shape {x.shape} does not match bank shape {bank.shape}")
    mats = bank.data[idx]
    out_data = np.einsum("bi,bij->bj", x.data, mats)
    parents = [x, bank]
    if bias is not None:
        out_data = out_data + bias.data[idx]
        parents.append(bias)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, np.einsum("bj,bij->bi", g, mats))
        if bank.requires_grad:
            np.add.at(_grad_buffer(bank), idx, np.einsum("bi,bj->bij", x.data, g))
        if bias is not None and bias.requires_grad:
            np.add.at(_grad_buffer(bias), idx, g)

    return _node(out_data, parents, bw, "bank_affine")


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), bw, "softmax")


def weighted_rows(w: Tensor, M: Tensor) -> Tensor:
    """Batched convex read ``out[b] = sum_i w[b, i] * M[b, i, :]``."""
    out_data = np.einsum("bn,bnd->bd", w.data, M.data)

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("bd,bnd->bn", g, M.data))
        if M.requires_grad:
            _accumulate(M, np.einsum("bn,bd->bnd", w.data, g))

    return _node(out_data, (w, M), bw, "weighted_rows")


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Batched outer product ``out[b, i, j] = a[b, i] * b[b, j]``."""
    out_data = np.einsum("bi,bj->bij", a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.einsum("bij,bj->bi", g, b.data))
        if b.requires_grad:
            _accumulate(b, np.einsum("bij,bi->bj", g, a.data))

    return _node(out_data, (a, b), bw, "outer")


def expand_rows(x: Tensor, batch: int) -> Tensor:
    """Repeat a tensor along a new leading batch axis."""
    out_data = np.broadcast_to(x.data, (batch,) + x.shape).copy()

    def bw(g):
        _accumulate(x, g.sum(axis=0))

    return _node(out_data, (x,), bw, "expand_rows")


# losses

def sigmoid_bce_with_logits(logits: Tensor, labels, mask=None) -> Tensor:
    """Summed binary cross-entropy on logits (numerically stable)."""
    y = np.asarray(labels, dtype=np.float64)
    m = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64)
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray((per * m).sum())

    def bw(g):
        _accumulate(logits, float(g) * (logistic(z) - y) * m)

    return _node(out_data, (logits,), bw, "sigmoid_bce_with_logits")


def bce(probs: Tensor, labels, mask=None, eps: float = 1e-12) -> Tensor:
    """Summed binary cross-entropy on probabilities, clipped away from 0 and 1."""
    y = np.asarray(labels, dtype=np.float64)
    m = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64)
    p = np.clip(probs.data, eps, 1.0 - eps)
    out_data = np.asarray((-(y * np.log(p) + (1 - y) * np.log(1 - p)) * m).sum())

    def bw(g):
        _accumulate(probs, float(g) * (-(y / p) + (1 - y) / (1 - p)) * m)

    return _node(out_data, (probs,), bw, "bce")


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    diff = pred.data - t
    out_data = np.asarray((diff * diff).mean())

    def bw(g):
        _accumulate(pred, float(g) * 2.0 * diff / diff.size)

    return _node(out_data, (pred,), bw, "mse")


# backward pass

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Fill ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Listed ``params`` that
    the loss does not reach get an explicit zero gradient. The graph is
    released afterwards, so a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph; rebuild the forward pass first")
    if loss.requires_grad:
        order = _topological(loss)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.is_leaf:
                node.grad = None
                node._backward = None
                node._parents = ()
    loss._consumed = True
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# initialisation

def glorot_uniform(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-r, r] with r = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    fan_in, fan_out = (shape[-2], shape[-1]) if len(shape) >= 2 else (shape[0], shape[0])
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def parameter(shape: Sequence[int], rng: np.random.Generator | None = None, name: str | None = None,
              init: str = "glorot") -> Tensor:
    if init == "zeros" or rng is None:
        data = np.zeros(tuple(shape))
    elif init == "glorot":
        data = glorot_uniform(shape, rng)
    else:
        raise ConfigurationError(f"unknown initialiser {init!r}")
    return Tensor(data, requires_grad=True, name=name)


# optimiser

class Adam:
    """Adam with bias correction and decoupled weight decay.

    Moments are kept per tensor and created lazily, so tensors that never
    receive a gradient are never touched. ``step_count`` counts optimizer
    steps; each tensor keeps its own bias-correction counter.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._moments: dict[int, list] = {}

    def moments(self, p: Tensor):
        st = self._moments.get(id(p))
        return None if st is None else (st[1], st[2], st[3])

    def step(self, params: Iterable[Tensor]) -> None:
        params = [p for p in params if p.grad is not None]
        for p in params:
            if not np.isfinite(p.grad).all():
                bad = int((~np.isfinite(p.grad)).sum())
                raise NonFiniteError(
                    f"non-finite gradient in tensor {p.name or '<unnamed>'} shape={p.shape} ({bad} bad entries)")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            st = self._moments.get(id(p))
            if st is None:
                st = [p, np.zeros_like(p.data), np.zeros_like(p.data), 0]
                self._moments[id(p)] = st
            _, m, v, t = st
            t += 1
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update
            st[3] = t

    @staticmethod
    def zero_grad(params: Iterable[Tensor]) -> None:
        for p in params:
            p.grad = None
