"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState
) -> list[np.ndarray]:
    """Return updated copies of ``params``; moments in ``state`` are updated in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p, dtype=np.float32) for p in params]
        state.exp_avg_sq = [np.zeros_like(p, dtype=np.float32) for p in params]
    if len(state.exp_avg) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = []
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, moment {m.shape} disagree")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new = p * np.float32(1.0 - state.lr * state.weight_decay)
        denom = np.sqrt(v / bc2) + state.eps
        new = new - np.float32(state.lr / bc1) * m / denom
        out.append(new.astype(np.float32))
    return out


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a named parameter list."""

    def __init__(self, named_params, lr=5e-4, weight_decay=5e-2, betas=(0.9, 0.999), eps=1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState(lr, weight_decay, betas[0], betas[1], eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.state.lr = lr
        new = adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
        for p, value in zip(self.params, new):
            p.data = value

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        if self.state.exp_avg:
            for n, m, v in zip(self.names, self.state.exp_avg, self.state.exp_avg_sq):
                out[f"exp_avg.{n}"] = m
                out[f"exp_avg_sq.{n}"] = v
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], step: int) -> None:
        self.state.step = int(step)
        if step == 0 and not tensors:
            self.state.exp_avg, self.state.exp_avg_sq = [], []
            return
        self.state.exp_avg = [np.array(tensors[f"exp_avg.{n}"], np.float32) for n in self.names]
        self.state.exp_avg_sq = [
            np.array(tensors[f"exp_avg_sq.{n}"], np.float32) for n in self.names
        ]


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def cosine_lr(step: int, warmup_steps: int, total_steps: int, lr_max: float) -> float:
    """Linear warmup to ``lr_max`` then half-cosine decay to zero at ``total_steps``."""
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
