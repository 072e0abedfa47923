"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors form an acyclic define-by-run graph; `backward` on a scalar root
fills `.grad` buffers by reverse topological traversal with `+=`
accumulation at fan-in. Training runs in float32; gradient-check tests
build float64 graphs (ops preserve their inputs' dtype).

Scalar constants in op code are Python floats on purpose: numpy's weak
promotion keeps float32 arrays float32 that way.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

from .errors import ContractViolation

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference / corpus encoding)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _ensure(other, self.data.dtype))

    def __radd__(self, other):
        return add(_ensure(other, self.data.dtype), self)

    def __sub__(self, other):
        return sub(self, _ensure(other, self.data.dtype))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _ensure(other, self.data.dtype))

    def __rmul__(self, other):
        return mul(_ensure(other, self.data.dtype), self)

    def __truediv__(self, scalar):
        return mul(self, _ensure(1.0 / float(scalar), self.data.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _ensure(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _reduce_broadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Fill leaf gradients of everything the scalar root depends on.

    Gradients accumulate (`+=`) into `.grad` of leaf tensors (parameters
    and inputs); interior nodes only relay flow, so big intermediate
    buffers are never materialized twice."""
    if root.data.shape != ():
        raise ContractViolation(f"backward requires a scalar root, got shape {root.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    flow: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.data.dtype)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            if node.grad.dtype == np.asarray(g).dtype:
                np.add(node.grad, g, out=node.grad)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in flow:
                flow[id(parent)] = flow[id(parent)] + pg
            else:
                flow[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (
        _reduce_broadcast(g, a.data.shape),
        _reduce_broadcast(g, b.data.shape),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _node(data, (a, b), lambda g: (
        _reduce_broadcast(g, a.data.shape),
        _reduce_broadcast(-g, b.data.shape),
    ))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(data, (a, b), lambda g: (
        _reduce_broadcast(g * b.data, a.data.shape),
        _reduce_broadcast(g * a.data, b.data.shape),
    ))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation(
            f"matmul requires rank >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_broadcast(ga, a.data.shape), _reduce_broadcast(gb, b.data.shape)

    return _node(data, (a, b), vjp)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _node(data, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ContractViolation(f"slice [{start}:{stop}] out of range for axis size {n}")
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        return (full,)

    return _node(a.data[slicer], (a,), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return _node(data, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (a,), vjp)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit population variance along `axis`.

    Affine gain/bias stay outside: compose with mul/add.
    """
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv_std

    def vjp(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gy_mean = (g * y).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - y * gy_mean),)

    return _node(y, (a,), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    phi_cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * phi_cdf

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (phi_cdf + a.data * pdf),)

    return _node(data.astype(a.data.dtype, copy=False), (a,), vjp)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0,1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    scale = 1.0 / (1.0 - p)
    return _node(a.data * keep * scale, (a,), lambda g: (g * keep * scale,))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractViolation(
            f"ids out of range [0, {table.data.shape[0]}) in embedding lookup"
        )

    def vjp(g):
        # sparse scatter-add: rows of g accumulate into the looked-up rows
        # (much faster than np.add.at for the table sizes used here)
        flat_ids = ids.reshape(-1)
        gmat = g.reshape(flat_ids.size, -1)
        scatter = sparse.csr_matrix(
            (np.ones(flat_ids.size, dtype=gmat.dtype),
             (flat_ids, np.arange(flat_ids.size))),
            shape=(table.data.shape[0], flat_ids.size),
        )
        dtable = np.asarray(scatter @ gmat).reshape(table.data.shape)
        return (dtable,)

    return _node(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: Sequence[int], positions: Sequence[int]) -> Tensor:
    """Mean token-level cross-entropy over the given logit rows.

    `positions` are row indices into `logits` ([n, V]); `targets[j]` is the
    class id for `positions[j]`. An empty position set yields 0 with zero
    gradient.
    """
    if logits.data.ndim != 2:
        raise ContractViolation(f"cross_entropy expects [n, V] logits, got {logits.data.shape}")
    pos = np.asarray(list(positions), dtype=np.int64)
    tgt = np.asarray(list(targets), dtype=np.int64)
    if pos.shape != tgt.shape:
        raise ContractViolation(f"{len(tgt)} targets for {len(pos)} masked positions")
    n, v = logits.data.shape
    if pos.size == 0:
        return _node(np.zeros((), dtype=logits.data.dtype), (logits,),
                     lambda g: (np.zeros_like(logits.data),))
    if pos.min() < 0 or pos.max() >= n:
        raise ContractViolation(f"mask position out of range [0, {n})")
    if np.unique(pos).size != pos.size:
        raise ContractViolation("mask positions must be distinct")
    if tgt.min() < 0 or tgt.max() >= v:
        raise ContractViolation(f"target id out of range [0, {v})")

    rows = logits.data[pos]
    shifted = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(pos.size), tgt]
    data = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)

    def vjp(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(pos.size), tgt] -= 1.0
        grad[pos] = p * (g / pos.size)  # positions are distinct
        return (grad,)

    return _node(data, (logits,), vjp)


def kl_div(p: Tensor, q: Tensor, eps: float = 1e-12) -> Tensor:
    """KL(p || q) for probability vectors; gradient flows to q only.

    q is clamped to >= eps before the log so softmax-tail underflow cannot
    produce infinities. The p side is treated as a constant even when it
    requires grad (distillation contract).
    """
    if p.data.shape != q.data.shape or p.data.ndim != 1:
        raise ContractViolation(
            f"kl_div expects equal-length vectors, got {p.data.shape} vs {q.data.shape}"
        )
    for name, t in (("p", p), ("q", q)):
        if t.data.min() < -1e-9:
            raise ContractViolation(f"{name} has negative entries")
        if abs(float(t.data.sum()) - 1.0) > 1e-6:
            raise ContractViolation(f"{name} does not sum to 1 (sum={float(t.data.sum()):.8f})")
    qc = np.maximum(q.data, eps)
    terms = np.where(p.data > 0.0, p.data * (np.log(np.maximum(p.data, eps)) - np.log(qc)), 0.0)
    data = np.asarray(terms.sum(), dtype=q.data.dtype)

    def vjp(g):
        gq = np.where(q.data > eps, -p.data / qc, 0.0) * g
        return (None, gq.astype(q.data.dtype, copy=False))

    return _node(data, (p, q), vjp)


# ---------------------------------------------------------------------------
# finite differences (the independent oracle used by the gradient checks)


def finite_difference_grad(f, arrays: list[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradients of scalar f w.r.t. each input array."""
    grads = []
    for k, x in enumerate(arrays):
        g = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f(*arrays))
            flat[i] = keep - h
            down = float(f(*arrays))
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays: list[np.ndarray], h: float = 1e-4, rtol: float = 1e-5) -> float:
    """Compare autodiff gradients against central differences.

    `build(*tensors)` must return a scalar Tensor. Returns the worst
    relative error (normalized by max(1, |numeric|)); raises AssertionError
    beyond rtol.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    backward(out)

    def evaluate(*xs):
        return build(*[Tensor(x) for x in xs]).data

    numeric = finite_difference_grad(evaluate, [a.copy() for a in arrays], h=h)
    worst = 0.0
    for t, n in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(n)
        denom = max(1.0, float(np.abs(n).max()))
        err = float(np.abs(analytic - n).max()) / denom
        worst = max(worst, err)
    if worst > rtol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} > {rtol:.0e}")
    return worst
