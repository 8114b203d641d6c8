"""Masking, contrastive alignment losses and the multi-choice masked-token objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import MLP, Module, NonFiniteError, ShapeError, Tensor
from .numerics.functional import l2_normalize, soft_cross_entropy


@dataclass
class LossWeights:
    alpha: float = 0.8
    beta: float = 1.0
    zeta: float = 1.0
    tau: float = 0.07
    momentum: float = 0.99
    mask_ratio: float = 0.45

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.beta < 0 or self.zeta < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def unimodal(self) -> bool:
        """True for the mask-modeling-only configuration with inert cross-modal paths."""
        return self.alpha == 1.0 and self.beta == 0.0 and self.zeta == 0.0


# ---------------------------------------------------------------- masking


def mask_count(g: int, ratio: float) -> int:
    """round(ratio * g) with halves rounded up."""
    return int(math.floor(ratio * g + 0.5))


@dataclass
class MaskSpec:
    indices: np.ndarray
    ratio: float
    g: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("mask indices must be unique")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.g):
            raise ValueError(f"mask index out of range for g={self.g}")

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.g, dtype=bool)
        out[self.indices] = True
        return out


def sample_mask(g: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    idx = rng.choice(g, size=mask_count(g, ratio), replace=False)
    return MaskSpec(np.sort(idx), ratio, g)


def sample_masks(batch: int, g: int, ratio: float, rng) -> np.ndarray:
    """(batch, g) boolean masks, one independent draw per row."""
    return np.stack([sample_mask(g, ratio, rng).as_bool() for _ in range(batch)])


# ---------------------------------------------------------------- queues


class NegativeQueue:
    """Fixed-capacity FIFO of unit vectors.

    Starts filled with random unit vectors so the contrastive loss is defined
    from the first step; ``warm`` turns true after one full fill of real keys.
    """

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        init = rng.standard_normal((capacity, dim))
        self.buffer = (init / np.linalg.norm(init, axis=1, keepdims=True)).astype(np.float32)
        self.cursor = 0
        self.filled = 0

    @property
    def capacity(self) -> int:
        return len(self.buffer)

    @property
    def dim(self) -> int:
        return self.buffer.shape[1]

    @property
    def warm(self) -> bool:
        return self.filled >= self.capacity

    def push(self, keys) -> None:
        keys = np.asarray(keys, np.float32)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"queue expects (n, {self.dim}) keys, got {keys.shape}")
        norms = np.linalg.norm(keys.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("queue keys must be unit-norm")
        for row in keys:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
        self.filled = min(self.filled + len(keys), self.capacity)

    def negatives(self) -> np.ndarray:
        return self.buffer

    def ordered(self) -> np.ndarray:
        """Real keys, oldest first."""
        if self.filled < self.capacity:
            return self.buffer[self.cursor - self.filled : self.cursor]
        return np.concatenate([self.buffer[self.cursor :], self.buffer[: self.cursor]])

    def state(self) -> dict:
        return {"buffer": self.buffer.copy(), "cursor": self.cursor, "filled": self.filled}

    def load_state(self, buffer, cursor: int, filled: int) -> None:
        buffer = np.asarray(buffer, np.float32)
        if buffer.shape != self.buffer.shape:
            raise ShapeError(f"queue state {buffer.shape} vs capacity {self.buffer.shape}")
        self.buffer = buffer.copy()
        self.cursor, self.filled = int(cursor), int(filled)


# ---------------------------------------------------------------- contrastive losses


class ProjectionHead(Module):
    """2-layer MLP to the shared space, then L2 normalization."""

    def __init__(self, dim: int, proj_dim: int, rng):
        self.mlp = MLP([dim, dim, proj_dim], rng)

    def forward(self, z: Tensor) -> Tensor:
        return l2_normalize(self.mlp(z), axis=-1)


def project_and_similarity(z_cls_a, z_cls_b, head_a: ProjectionHead, head_b: ProjectionHead) -> Tensor:
    """s = f_a(z_a) . f_b(z_b), one value per row."""
    return (head_a(z_cls_a) * head_b(z_cls_b)).sum(axis=-1)


def info_nce(s_pos: Tensor, s_negs, tau: float) -> Tensor:
    """Batch mean of -log softmax over [positive, negatives] at temperature tau.

    ``s_pos`` is (B,) and ``s_negs`` is (B, Q) or a shared (Q,).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    s_pos = s_pos if isinstance(s_pos, Tensor) else nx.tensor(s_pos)
    s_negs = s_negs if isinstance(s_negs, Tensor) else nx.tensor(s_negs)
    if s_negs.shape[-1] == 0:
        raise ValueError("info_nce needs at least one negative")
    if s_pos.ndim == 0:
        s_pos = nx.reshape(s_pos, (1,))
    B = s_pos.shape[0]
    if s_negs.ndim == 1:
        s_negs = nx.reshape(s_negs, (1, -1)) + np.zeros((B, 1), np.float32)
    if s_negs.shape[0] != B:
        raise ShapeError(f"info_nce: {B} positives vs negatives {s_negs.shape}")
    logits = nx.concat([nx.reshape(s_pos, (B, 1)), s_negs], axis=1) * (1.0 / tau)
    return -nx.log_softmax(logits, axis=-1)[:, 0].mean()


def contrastive_term(query: Tensor, key: np.ndarray, queue: NegativeQueue, tau: float) -> Tensor:
    """InfoNCE for online queries against constant momentum keys and queued negatives."""
    key = np.asarray(key.data if isinstance(key, Tensor) else key, np.float32)
    if key.shape != query.shape:
        raise ShapeError(f"query {query.shape} vs key {key.shape}")
    s_pos = (query * key).sum(axis=-1)
    s_neg = nx.matmul(query, queue.negatives().T)
    return info_nce(s_pos, s_neg, tau)


def pic_loss(q_p, q_p_plus, k_i, k_i_plus, image_queue: NegativeQueue, tau: float) -> Tensor:
    """Point-image term: 1/2 [L(P, I+) + L(P+, I)]; negatives from the image queue."""
    return (
        contrastive_term(q_p, k_i_plus, image_queue, tau) + contrastive_term(q_p_plus, k_i, image_queue, tau)
    ) * 0.5


def umc_loss(q_p, k_p_plus, q_i, k_i_plus, point_queue: NegativeQueue, image_queue: NegativeQueue, tau):
    """Same-modality term: 1/2 [L(P, P+) + L(I, I+)]; negatives from each modality's queue."""
    return (
        contrastive_term(q_p, k_p_plus, point_queue, tau) + contrastive_term(q_i, k_i_plus, image_queue, tau)
    ) * 0.5


def momentum_update(online: Module, momentum: Module, m: float) -> None:
    """theta_k <- m theta_k + (1 - m) theta_q, in place, outside any tape."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    a = list(online.named_parameters())
    b = list(momentum.named_parameters())
    if [n for n, _ in a] != [n for n, _ in b] or any(p.shape != q.shape for (_, p), (_, q) in zip(a, b)):
        raise ValueError("online and momentum modules differ in structure")
    for (_, q), (_, k) in zip(a, b):
        k.data = (m * k.data + (1.0 - m) * q.data).astype(k.data.dtype)


# ---------------------------------------------------------------- multi-choice targets


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def reweight_matrix(z_pi) -> np.ndarray:
    """W_ik = exp(<z_i, z_k>) / sum_k' exp(<z_i, z_k'>), batched over leading axes."""
    z = _as_array(z_pi).astype(np.float64)
    sim = z @ np.swapaxes(z, -1, -2)
    sim -= sim.max(axis=-1, keepdims=True)
    w = np.exp(sim)
    return w / w.sum(axis=-1, keepdims=True)


def similarity_reweight(z_pi, p_d) -> tuple[np.ndarray, np.ndarray]:
    """Returns (W, P') with P' = W P(d); no gradient flows through either."""
    p = _as_array(p_d)
    z = _as_array(z_pi)
    if z.shape[:-1] != p.shape[:-1]:
        raise ShapeError(f"fused sequence {z.shape} does not match token rows {p.shape}")
    w = reweight_matrix(z)
    p_prime = w @ p.astype(np.float64)
    return w.astype(np.float32), p_prime.astype(np.float32)


def blend_targets(p_d, p_prime, alpha: float) -> np.ndarray:
    """d_hat = alpha P(d) + (1 - alpha) P'(d), a constant target."""
    p, q = _as_array(p_d), _as_array(p_prime)
    if p.shape != q.shape:
        raise ShapeError(f"blend: {p.shape} vs {q.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = p.dtype.type(alpha)
    return a * p + (p.dtype.type(1.0) - a) * q


def mcm_loss(pred_logits: Tensor, d_hat, mask) -> Tensor:
    """Soft cross-entropy against d_hat, averaged over masked positions."""
    d_hat = _as_array(d_hat)
    mask = np.asarray(mask, bool)
    if mask.shape != pred_logits.shape[:-1]:
        raise ShapeError(f"mask {mask.shape} vs predictions {pred_logits.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked modeling loss needs at least one masked position")
    ce = soft_cross_entropy(pred_logits, d_hat.astype(pred_logits.data.dtype))
    return (ce * (mask / n).astype(ce.data.dtype)).sum()


def total_loss(components: dict, weights: LossWeights):
    """L = L_mcm + beta L_pic + zeta L_umc; zero-weight terms may be absent."""
    parts = [("mcm", 1.0), ("pic", weights.beta), ("umc", weights.zeta)]
    total = None
    for name, w in parts:
        if name not in components:
            if w:
                raise KeyError(f"missing loss component {name!r}")
            continue
        c = components[name]
        value = c.item() if isinstance(c, Tensor) else float(c)
        if not math.isfinite(value):
            raise NonFiniteError(f"loss component {name} is not finite ({value})")
        if w == 0:
            continue
        term = c * w if w != 1.0 else c
        total = term if total is None else total + term
    return 0.0 if total is None else total


__all__ = [
    "LossWeights",
    "MaskSpec",
    "mask_count",
    "sample_mask",
    "sample_masks",
    "NegativeQueue",
    "ProjectionHead",
    "project_and_similarity",
    "info_nce",
    "contrastive_term",
    "pic_loss",
    "umc_loss",
    "momentum_update",
    "reweight_matrix",
    "similarity_reweight",
    "blend_targets",
    "mcm_loss",
    "total_loss",
]
