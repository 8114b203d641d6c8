"""Discrete VAE point-patch tokenizer.

The encoder is a small dynamic-graph network (stacked EdgeConv layers over the
points of each patch, max-pooled to a patch code) that produces logits over a
learned codebook. The decoder folds a fixed 2-D grid, conditioned on a token
embedding, into a patch of 3-D offsets around the patch center.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .geometry import PatchSet, chamfer_tensor, group_and_normalize
from .numerics import MLP, LayerNorm, Linear, Module, Parameter, Tensor

logger = logging.getLogger(__name__)


@dataclass
class DvaeConfig:
    vocab_size: int = 128
    token_dim: int = 32
    depth: int = 4
    width: int = 32
    edge_k: int = 4
    hidden: int = 64
    grid_size: int = 32
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_decay_steps: int = 500
    kl_weight: float = 0.01
    straight_through: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError("temperatures must satisfy 0 < tau_end <= tau_start")

    def temperature(self, step: int) -> float:
        """Geometric anneal from ``tau_start`` to ``tau_end`` over ``tau_decay_steps``."""
        frac = min(max(step, 0) / max(self.tau_decay_steps, 1), 1.0)
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


@dataclass
class TokenDistribution:
    probs: np.ndarray  # (..., g, |V|)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, np.float32)

    @property
    def ids(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)


def folding_grid(m: int) -> np.ndarray:
    """A rows x cols lattice in [-1, 1]^2 with rows * cols == m."""
    rows = max(r for r in range(1, int(math.isqrt(m)) + 1) if m % r == 0)
    cols = m // rows
    u = np.linspace(-1.0, 1.0, cols) if cols > 1 else np.zeros(1)
    v = np.linspace(-1.0, 1.0, rows) if rows > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float32)


def _feature_knn(feats: np.ndarray, k: int) -> np.ndarray:
    """Per-patch kNN in feature space (self included), ties by index."""
    sq = (feats * feats).sum(-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * feats @ np.swapaxes(feats, -1, -2)
    return np.argsort(d, axis=-1, kind="stable")[..., :k]


class EdgeConv(Module):
    def __init__(self, d_in: int, d_out: int, rng):
        self.lin = Linear(2 * d_in, d_out, rng)

    def forward(self, x: Tensor, k: int) -> Tensor:
        B, n, C = x.shape
        idx = _feature_knn(x.data, min(k, n))
        e = idx.shape[-1]
        flat = nx.reshape(x, (B * n, C))
        offsets = (np.arange(B) * n)[:, None, None]
        nbrs = nx.take(flat, (idx + offsets).reshape(-1), axis=0).reshape(B, n, e, C)
        center = nx.reshape(x, (B, n, 1, C))
        edge = nx.concat([center + np.zeros((1, 1, e, 1), np.float32), nbrs - center], axis=-1)
        return nx.max_(nx.gelu(self.lin(edge)), axis=2)


class FoldLayer(Module):
    """One folding step: MLP over [per-point input, token embedding]."""

    def __init__(self, d_point: int, d_token: int, hidden: int, rng):
        self.point_in = Linear(d_point, hidden, rng)
        self.token_in = Linear(d_token, hidden, rng, bias=False)
        self.mlp = MLP([hidden, hidden, 3], rng)

    def forward(self, points: Tensor, emb: Tensor) -> Tensor:
        # split first layer == Linear(concat([points, emb])) without materializing the concat
        h = self.point_in(points) + nx.reshape(self.token_in(emb), emb.shape[:-1] + (1, -1))
        return self.mlp(nx.gelu(h))


class DiscreteVAE(Module):
    def __init__(self, config: DvaeConfig, rng: np.random.Generator):
        self.config = config
        c = config
        dims = [3] + [c.width] * c.depth
        self.edges = [EdgeConv(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.pool_in = Linear(c.width * c.depth, c.hidden, rng)
        self.pool_norm = LayerNorm(c.hidden)
        self.to_logits = MLP([c.hidden, c.hidden, c.vocab_size], rng)
        self.codebook = Parameter(rng.normal(0.0, 1.0, (c.vocab_size, c.token_dim)).astype(np.float32))
        self.fold1 = FoldLayer(2, c.token_dim, c.hidden, rng)
        self.fold2 = FoldLayer(3, c.token_dim, c.hidden, rng)
        self.grid = folding_grid(c.grid_size)

    def logits(self, patches) -> Tensor:
        """Token logits for normalized patches of shape (..., k, 3) -> (..., |V|)."""
        p = patches if isinstance(patches, Tensor) else nx.tensor(patches)
        lead, k = p.shape[:-2], p.shape[-2]
        if p.shape[-1] != 3:
            raise nx.ShapeError(f"patches must end in (k, 3), got {p.shape}")
        x = nx.reshape(p, (-1, k, 3))
        feats = []
        for layer in self.edges:
            x = layer(x, self.config.edge_k)
            feats.append(x)
        h = nx.max_(self.pool_in(nx.concat(feats, axis=-1)), axis=1)
        out = self.to_logits(nx.gelu(self.pool_norm(h)))
        return nx.reshape(out, lead + (self.config.vocab_size,))

    def tokenize(self, patches, temperature: float | None = None) -> Tensor:
        """Token distribution P(d) read at ``temperature`` (default: the final Gumbel temperature).

        The decoder learned from samples at the end of the anneal, so that is the
        sharpness at which the codes are meaningful; argmax is unaffected.
        """
        t = self.config.tau_end if temperature is None else float(temperature)
        if t <= 0:
            raise ValueError(f"temperature must be positive, got {t}")
        return nx.softmax(self.logits(patches) * (1.0 / t), axis=-1)

    def embed(self, tokens) -> Tensor:
        """Token ids (..., g) or relaxed one-hots (..., g, |V|) -> embeddings (..., g, D_tok)."""
        V = self.config.vocab_size
        if isinstance(tokens, Tensor):
            if tokens.shape[-1] != V:
                raise nx.ShapeError(f"relaxed tokens must end in |V|={V}, got {tokens.shape}")
            return nx.matmul(tokens, self.codebook)
        ids = np.asarray(tokens)
        if not np.issubdtype(ids.dtype, np.integer):
            raise TypeError("token ids must be integers")
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise IndexError(f"token id out of vocabulary range [0, {V})")
        return nx.take(self.codebook, ids, axis=0)

    def decode(self, tokens, centers) -> Tensor:
        """Reconstruct (..., g * m, 3) absolute points from tokens and patch centers."""
        return self.decode_offsets(tokens, centers)[1]

    def decode_offsets(self, tokens, centers) -> tuple[Tensor, Tensor]:
        emb = self.embed(tokens)
        centers = np.asarray(centers, np.float32)
        if centers.shape != emb.shape[:-1] + (3,):
            raise nx.ShapeError(f"centers {centers.shape} do not match {emb.shape[:-1]} tokens")
        grid = nx.tensor(self.grid)
        folded = self.fold1(grid, emb)
        offsets = self.fold2(folded, emb)  # (..., g, m, 3)
        absolute = offsets + centers[..., None, :]
        lead = absolute.shape[:-3]
        return offsets, nx.reshape(absolute, lead + (-1, 3))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))


def quantize_gumbel(logits: Tensor, temperature: float, rng=None, noise=None):
    """Gumbel-softmax relaxation of a token distribution.

    Returns ``(relaxed, ids, straight_through)``: the relaxed sample, the hard
    ids (argmax of the relaxed sample), and a tensor whose forward value is
    the hard one-hot but whose gradient is that of ``relaxed``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = gumbel_noise(logits.shape, rng)
    relaxed = nx.softmax((nx.log_softmax(logits, axis=-1) + noise) * (1.0 / temperature), axis=-1)
    ids = relaxed.data.argmax(axis=-1)
    hard = np.zeros_like(relaxed.data)
    np.put_along_axis(hard, ids[..., None], 1.0, axis=-1)
    straight = relaxed + (hard - relaxed.data)
    return relaxed, ids, straight


def quantize_distribution(dist: TokenDistribution, temperature: float, rng):
    """:func:`quantize_gumbel` on an explicit probability matrix."""
    logits = nx.tensor(np.log(np.clip(dist.probs, 1e-30, None)))
    return quantize_gumbel(logits, temperature, rng)


def usage_kl(probs: Tensor) -> Tensor:
    """KL(mean token usage || uniform)."""
    V = probs.shape[-1]
    q = nx.reshape(probs, (-1, V)).mean(axis=0)
    return (q * nx.log(q * V + 1e-12)).sum()


def dvae_loss(model: DiscreteVAE, patches: np.ndarray, temperature: float, rng, kl_weight=None):
    """Chamfer reconstruction + kappa * usage KL for a batch of patches (B, g, k, 3).

    Chamfer is evaluated per patch in center-relative coordinates, which equals
    the absolute-coordinate distance since both sides share the center. The
    decoder sees the relaxed sample unless the config asks for straight-through
    hard codes; hard codes from a random init tend to collapse onto one token.
    Returns ``(loss, chamfer, ids)``.
    """
    kl_weight = model.config.kl_weight if kl_weight is None else kl_weight
    logits = model.logits(patches)
    relaxed, ids, straight = quantize_gumbel(logits, temperature, rng)
    zeros = np.zeros(patches.shape[:-2] + (3,), np.float32)
    offsets, _ = model.decode_offsets(straight if model.config.straight_through else relaxed, zeros)
    m = offsets.shape[-2]
    rec = chamfer_tensor(nx.reshape(offsets, (-1, m, 3)), patches.reshape(-1, patches.shape[-2], 3))
    loss = rec
    if kl_weight:
        loss = rec + usage_kl(nx.softmax(logits, axis=-1)) * kl_weight
    return loss, rec, ids


def dvae_train_step(model, optimizer, patches: np.ndarray, step: int, rng) -> tuple[float, float]:
    """One AdamW step on a batch of normalized patches; returns (loss, chamfer)."""
    optimizer.zero_grad()
    with nx.Tape() as tape:
        loss, rec, _ = dvae_loss(model, patches, model.config.temperature(step), rng)
    tape.backward(loss)
    optimizer.step()
    tape.clear()
    return loss.item(), rec.item()


def patch_chamfer(model: DiscreteVAE, patches: np.ndarray, batch: int = 64) -> float:
    """Mean per-patch Chamfer of the argmax-token round trip over (..., k, 3) patches."""
    flat = patches.reshape(-1, patches.shape[-2], 3)
    total = 0.0
    for i in range(0, len(flat), batch):
        chunk = flat[i : i + batch]
        ids = model.logits(chunk).data.argmax(-1)
        offsets, _ = model.decode_offsets(ids, np.zeros((len(chunk), 3), np.float32))
        total += chamfer_tensor(offsets, chunk).item() * len(chunk)
    return total / len(flat)


def patchify(clouds, g: int, k: int, rng=None) -> list[PatchSet]:
    """Group each cloud; FPS start indices come from ``rng`` (0 when None)."""
    out = []
    for pts in clouds:
        pts = np.asarray(pts, np.float32)
        start = 0 if rng is None else int(rng.integers(0, len(pts)))
        out.append(group_and_normalize(pts, g, k, start))
    return out


def codebook_entropy(ids: np.ndarray, vocab_size: int) -> float:
    counts = np.bincount(np.asarray(ids).ravel(), minlength=vocab_size).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


class DVAETokenizer(BaseEstimator, TransformerMixin):
    """Fit a discrete VAE on point clouds; ``transform`` returns token distributions.

    Parameters
    ----------
    n_groups, group_size : int
        Patches per cloud (FPS centers) and points per patch (kNN).
    vocab_size, token_dim, depth, width, edge_k, hidden : int
        Architecture; the decoder emits ``group_size`` points per patch.
    n_steps, batch_size, lr, weight_decay, warmup_steps :
        AdamW + cosine schedule.
    tau_start, tau_end, kl_weight : float
        Gumbel temperature anneal and uniform-prior KL weight.
    random_state : int
    """

    def __init__(
        self,
        n_groups=16,
        group_size=32,
        vocab_size=128,
        token_dim=32,
        depth=4,
        width=32,
        edge_k=4,
        hidden=64,
        n_steps=500,
        batch_size=8,
        lr=2e-3,
        weight_decay=5e-4,
        warmup_steps=25,
        tau_start=1.0,
        tau_end=0.1,
        kl_weight=0.01,
        random_state=0,
    ):
        self.n_groups = n_groups
        self.group_size = group_size
        self.vocab_size = vocab_size
        self.token_dim = token_dim
        self.depth = depth
        self.width = width
        self.edge_k = edge_k
        self.hidden = hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.kl_weight = kl_weight
        self.random_state = random_state

    def _config(self) -> DvaeConfig:
        return DvaeConfig(
            vocab_size=self.vocab_size,
            token_dim=self.token_dim,
            depth=self.depth,
            width=self.width,
            edge_k=self.edge_k,
            hidden=self.hidden,
            grid_size=self.group_size,
            tau_start=self.tau_start,
            tau_end=self.tau_end,
            tau_decay_steps=self.n_steps,
            kl_weight=self.kl_weight,
        )

    def _patches(self, X, rng=None) -> tuple[np.ndarray, np.ndarray]:
        X = _check_clouds(X)
        if self.group_size * self.n_groups < X.shape[1]:
            raise ValueError(
                f"grid {self.group_size} x {self.n_groups} patches cannot cover {X.shape[1]} points"
            )
        sets = patchify(X, self.n_groups, self.group_size, rng)
        return np.stack([s.patches for s in sets]), np.stack([s.centers for s in sets])

    def fit(self, X, y=None):
        rng = np.random.default_rng(self.random_state)
        config = self._config()
        self.model_ = DiscreteVAE(config, rng)
        patches, _ = self._patches(X, rng)
        opt = nx.AdamW(list(self.model_.named_parameters()), lr=self.lr, weight_decay=self.weight_decay)
        self.initial_chamfer_ = patch_chamfer(self.model_, patches)
        self.history_ = []
        n = len(patches)
        order = rng.permutation(n)
        cursor = 0
        for step in range(self.n_steps):
            if cursor + self.batch_size > n:
                order, cursor = rng.permutation(n), 0
            batch = patches[order[cursor : cursor + self.batch_size]]
            cursor += self.batch_size
            opt.state.lr = nx.cosine_lr(step, self.warmup_steps, self.n_steps, self.lr)
            loss, rec = dvae_train_step(self.model_, opt, batch, step, rng)
            self.history_.append({"step": step, "loss": loss, "chamfer": rec})
            if step % 100 == 0:
                logger.info("dvae step %d loss %.5f chamfer %.5f", step, loss, rec)
        self.optimizer_ = opt
        self.final_chamfer_ = patch_chamfer(self.model_, patches)
        ids = self.model_.logits(patches).data.argmax(-1)
        self.codebook_entropy_ = codebook_entropy(ids, self.vocab_size)
        logger.info(
            "dvae chamfer %.5f -> %.5f, usage entropy %.3f",
            self.initial_chamfer_, self.final_chamfer_, self.codebook_entropy_,
        )
        self.model_.freeze()
        return self

    def transform(self, X) -> np.ndarray:
        """Token distributions, shape (n_clouds, n_groups, vocab_size)."""
        check_is_fitted(self, "model_")
        patches, _ = self._patches(X)
        return self.model_.tokenize(patches).data

    def reconstruct(self, X) -> np.ndarray:
        """Round trip through argmax tokens: (n_clouds, n_groups * group_size, 3)."""
        check_is_fitted(self, "model_")
        patches, centers = self._patches(X)
        ids = self.model_.logits(patches).data.argmax(-1)
        return self.model_.decode(ids, centers).data

    def get_config(self) -> dict:
        return asdict(self._config())

    @classmethod
    def from_state(cls, params: dict, state: dict) -> "DVAETokenizer":
        """A fitted, frozen tokenizer rebuilt from ``get_params()`` and a parameter dict."""
        tok = cls(**params)
        tok.model_ = DiscreteVAE(tok._config(), np.random.default_rng(0))
        tok.model_.load_state_dict(state)
        tok.model_.freeze()
        return tok


def _check_clouds(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != 3:
        raise ValueError(f"expected clouds of shape (n, N, 3), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("clouds contain non-finite coordinates")
    return X
