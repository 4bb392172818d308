"""Dense tensors with a reverse-mode tape.

Every op below computes its forward value with numpy and, when any input
requires a gradient, records a closure mapping the output gradient to input
gradients. ``backward`` walks the recorded graph in reverse topological order
and accumulates into the ``grad`` buffers of leaf tensors.

Working precision is float32 by default; ``precision(np.float64)`` switches
newly created tensors to 64-bit (used by gradient checks).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


def get_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (GPT-2 variant)."""
    d = x.data
    k = d.dtype.type(math.sqrt(2.0 / math.pi))
    c = d.dtype.type(0.044715)
    half = d.dtype.type(0.5)
    d2 = d * d
    t = np.tanh(k * (d + c * d2 * d))
    out = half * d * (1 + t)

    def bw(g):
        dinner = k * (1 + 3 * c * d2)
        return (g * (half * (1 + t) + half * d * (1 - t * t) * dinner),)

    return _record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` may be a 2-D weight."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError(f"embedding_lookup: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {weight.shape}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _record(weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------------------
# normalisation and attention


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), bw)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggam = gbet = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            ggam = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbet = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gbet

    return _record(out, (x, gamma, beta), bw)


def causal_attention_scores(q: Tensor, k: Tensor, scale_by: float | None = None) -> Tensor:
    """Scaled ``q @ k^T`` over ``[..., T, d]`` inputs with future positions set to -inf."""
    if q.shape != k.shape:
        raise ShapeError(f"causal_attention_scores: q {q.shape} and k {k.shape} differ")
    T, d = q.shape[-2], q.shape[-1]
    s = q.data.dtype.type(scale_by if scale_by is not None else 1.0 / math.sqrt(d))
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * s
    scores[..., future] = -np.inf

    def bw(g):
        g = np.where(future, 0, g) * s
        return g @ k.data, np.swapaxes(g, -1, -2) @ q.data

    return _record(scores, (q, k), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean next-token negative log-likelihood over non-ignored positions."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    flat_t = targets.reshape(-1)
    keep = flat_t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    if flat_t[keep].min() < 0 or flat_t[keep].max() >= V:
        raise ShapeError(f"cross_entropy: target ids outside [0, {V})")
    logp = log_softmax_np(logits.data.reshape(-1, V))
    rows = np.nonzero(keep)[0]
    picked = logp[rows, flat_t[rows]]
    loss = -picked.sum() / logp.dtype.type(n)

    def bw(g):
        p = np.exp(logp)
        p[~keep] = 0
        p[rows, flat_t[rows]] -= 1
        return ((p * (g / logp.dtype.type(n))).reshape(logits.shape),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.data.dtype)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
