from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def _label(p: Tensor, i: int) -> str:
    return p.name or f"param[{i}]"


def grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        sq = float(np.sum(p.grad.astype(np.float64) ** 2))
        if not np.isfinite(sq):
            raise NonFiniteGradient(f"non-finite gradient in {_label(p, i)}")
        total += sq
    return float(np.sqrt(total))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> tuple[float, float]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns ``(norm_before, applied_scale)``; the scale is 1.0 when no clipping
    was needed.
    """
    norm = grad_norm(params)
    if norm <= max_norm:
        return norm, 1.0
    s = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(s)
    return norm, s


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(param: Tensor, grad: np.ndarray, state: AdamState, lr: float,
               betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
               weight_decay: float = 0.1) -> None:
    """One decoupled-weight-decay Adam update applied in place to ``param.data``."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient in {param.name or 'parameter'}")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    dt = param.data.dtype.type
    if weight_decay:
        param.data *= dt(1 - lr * weight_decay)
    param.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.data.dtype)


@dataclass
class AdamW:
    """AdamW over a fixed parameter list.

    Parameters whose ``grad`` is None at ``step`` time are skipped entirely:
    no moment update, no weight decay. Step counts are kept per parameter, so
    a parameter that is only trained on some steps gets its own bias correction.
    """

    params: list[Tensor]
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    no_decay: set[int] = field(default_factory=set)
    state: dict[int, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        # biases and layer-norm gains are conventionally not decayed
        self.no_decay = {id(p) for p in self.params if p.ndim < 2} | self.no_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            wd = 0.0 if id(p) in self.no_decay else self.weight_decay
            adamw_step(p, p.grad, st, lr, self.betas, self.eps, wd)
