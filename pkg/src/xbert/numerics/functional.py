"""Composite operations built from the primitives in :mod:`tensor`."""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    log_softmax,
    matmul,
    mul,
    softmax,
    sqrt,
    sum_,
)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    return matmul(softmax(scores, axis=-1), v)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / sqrt(sum_(x * x, axis=axis, keepdims=True) + eps)


def soft_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row ``-sum_k target_k log softmax(logits)_k``; ``target`` is a constant."""
    if logits.shape != np.shape(target):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs target {np.shape(target)}")
    return -sum_(mul(log_softmax(logits, axis=-1), target), axis=-1)
