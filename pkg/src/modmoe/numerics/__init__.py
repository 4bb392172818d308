"""Small dense-tensor engine with reverse-mode autodiff, AdamW and seeded RNG."""
from .optim import AdamState, AdamW, NonFiniteGradient, adamw_step, clip_grad_norm, grad_norm
from .rng import Rng, derive_seed
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    causal_attention_scores,
    cross_entropy,
    embedding_lookup,
    gelu,
    get_dtype,
    grad_enabled,
    layer_norm,
    log_softmax_np,
    matmul,
    mul,
    no_grad,
    precision,
    reshape,
    scale,
    softmax,
    sum_all,
    transpose,
)

__all__ = [
    "AdamState", "AdamW", "NonFiniteGradient", "Rng", "ShapeError", "Tensor",
    "add", "adamw_step", "backward", "causal_attention_scores", "clip_grad_norm",
    "cross_entropy", "derive_seed", "embedding_lookup", "gelu", "get_dtype",
    "grad_enabled", "grad_norm", "layer_norm", "log_softmax_np", "matmul", "mul",
    "no_grad", "precision", "reshape", "scale", "softmax", "sum_all", "transpose",
]
