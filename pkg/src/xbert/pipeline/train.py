"""Cross-modal masked pretraining loop and its estimator wrapper."""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .. import numerics as nx
from ..geometry import group_and_normalize
from ..numerics import NonFiniteError
from ..objectives import (
    NegativeQueue,
    blend_targets,
    mcm_loss,
    momentum_update,
    pic_loss,
    sample_masks,
    similarity_reweight,
    total_loss,
    umc_loss,
)
from ..synthdata import PairDataset, load_dataset
from ..tokenizer import DVAETokenizer, _check_clouds
from .checkpoint import Checkpoint, load_checkpoint, rng_from_json, rng_to_json, save_checkpoint
from .config import RunConfig
from .metrics import MetricsRecord, MetricsWriter, loss_curve_svg, write_csv
from .model import CrossModalModel, MomentumBranch

logger = logging.getLogger(__name__)


def group_clouds(clouds, g: int, k: int, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Patchify a stack of clouds; random FPS starts when ``rng`` is given, index 0 otherwise."""
    patches, centers = [], []
    for pts in np.asarray(clouds, np.float32):
        start = 0 if rng is None else int(rng.integers(0, len(pts)))
        ps = group_and_normalize(pts, g, k, start)
        patches.append(ps.patches)
        centers.append(ps.centers)
    return np.stack(patches), np.stack(centers)


class CrossModalPretrainer(BaseEstimator, TransformerMixin):
    """Masked cross-modal pretraining of a point transformer.

    ``fit`` consumes a :class:`~xbert.synthdata.PairDataset` and a fitted,
    frozen :class:`~xbert.tokenizer.DVAETokenizer`; ``transform`` maps point
    clouds (n, N, 3) to frozen features ``[z_cls || max_i z_i]``.

    Parameters
    ----------
    config : RunConfig, optional
        Every architectural and optimization setting; defaults to ``RunConfig()``.
    metrics_path : str or Path, optional
        JSONL file receiving one record per step.
    """

    def __init__(self, config: RunConfig | None = None, metrics_path=None):
        self.config = config
        self.metrics_path = metrics_path

    # ------------------------------------------------------------ setup

    def _cfg(self) -> RunConfig:
        return self.config if self.config is not None else RunConfig()

    def _init_state(self, tokenizer: DVAETokenizer) -> None:
        cfg = self._cfg()
        rng = np.random.default_rng(cfg.seed)
        self.model_ = CrossModalModel(cfg, rng)
        self.momentum_ = MomentumBranch(self.model_)
        self.point_queue_ = NegativeQueue(cfg.queue_size, cfg.proj_dim, rng)
        self.image_queue_ = NegativeQueue(cfg.queue_size, cfg.proj_dim, rng)
        o = cfg.optim
        self.optimizer_ = nx.AdamW(list(self.model_.named_parameters()), lr=o.lr, weight_decay=o.weight_decay)
        self.rng_ = rng
        self.step_ = 0
        self.tokenizer_ = tokenizer
        self.history_: list[MetricsRecord] = []

    def _check_inputs(self, dataset: PairDataset, tokenizer: DVAETokenizer) -> None:
        cfg = self._cfg()
        if not isinstance(dataset, PairDataset):
            raise TypeError("fit expects a PairDataset")
        check_is_fitted(tokenizer, "model_")
        if tokenizer.vocab_size != cfg.dvae.vocab_size:
            raise ValueError(f"tokenizer vocabulary {tokenizer.vocab_size} != config {cfg.dvae.vocab_size}")
        if tokenizer.group_size != cfg.groups.group_size:
            raise ValueError("tokenizer patch size differs from the configured group size")
        if dataset.image_shape != (cfg.data.image_size, cfg.data.image_size):
            raise ValueError(f"dataset images {dataset.image_shape} do not match image_size {cfg.data.image_size}")
        if dataset.n_points < cfg.groups.group_size:
            raise ValueError("clouds have fewer points than one patch")

    # ------------------------------------------------------------ training

    def fit(self, X: PairDataset, y=None, *, tokenizer: DVAETokenizer):
        self._check_inputs(X, tokenizer)
        self._init_state(tokenizer)
        cfg = self._cfg()
        writer = MetricsWriter(self.metrics_path)
        n = len(X)
        B = min(cfg.optim.batch_size, n)
        order, cursor = self.rng_.permutation(n), 0
        t0 = time.perf_counter()
        for _ in range(cfg.optim.steps):
            if cursor + B > n:
                order, cursor = self.rng_.permutation(n), 0
            idx = np.sort(order[cursor : cursor + B])
            cursor += B
            record = self._train_step(X, idx, t0)
            writer.append(record)
            self.history_.append(record)
            if record.step % 25 == 0:
                logger.info(
                    "step %d total %.4f mcm %.4f pic %.4f umc %.4f top1 %.3f",
                    record.step, record.total, record.mcm, record.pic, record.umc, record.top1,
                )
        return self

    def _train_step(self, ds: PairDataset, idx: np.ndarray, t0: float) -> MetricsRecord:
        cfg = self._cfg()
        w = cfg.losses
        g, k = cfg.groups.num_groups, cfg.groups.group_size
        model, mom = self.model_, self.momentum_
        rng = self.rng_
        patches, centers = group_clouds(ds.P[idx], g, k, rng)
        mask = sample_masks(len(idx), g, w.mask_ratio, rng)
        if not mask.any():
            raise ValueError("mask ratio produces no masked patches; raise mask_ratio or num_groups")
        p_d = self.tokenizer_.model_.tokenize(patches).data
        use_contrast = w.beta > 0 or w.zeta > 0
        lr = nx.cosine_lr(self.step_, cfg.optim.warmup_steps, cfg.optim.steps, cfg.optim.lr)

        self.optimizer_.zero_grad()
        parts = {}
        try:
            with nx.Tape() as tape:
                out_p = model.point_encoder(patches, centers, mask)
                if w.unimodal:
                    # mask modeling only: predict straight from the point stream, images untouched
                    logits = model.token_head(out_p.z_patches)
                    d_hat = p_d
                else:
                    images, images_plus = ds.images(idx)
                    out_i = model.image_encoder(images)
                    z_pi = model.ice(out_p.z_patches, out_i.z_patches)
                    logits = model.token_head(z_pi)
                    _, p_prime = similarity_reweight(z_pi.data, p_d)
                    d_hat = blend_targets(p_d, p_prime, w.alpha)
                parts["mcm"] = mcm_loss(logits, d_hat, mask)
                if use_contrast:
                    plus_patches, plus_centers = group_clouds(ds.P_plus[idx], g, k, rng)
                    out_pp = model.point_encoder(plus_patches, plus_centers)
                    q_p = model.point_proj(out_p.z_cls)
                    q_pp = model.point_proj(out_pp.z_cls)
                    q_i = model.image_proj(out_i.z_cls)
                    k_pp = mom.point_proj(mom.point_encoder(plus_patches, plus_centers).z_cls).data
                    k_i = mom.image_proj(mom.image_encoder(images).z_cls).data
                    k_ip = mom.image_proj(mom.image_encoder(images_plus).z_cls).data
                    parts["pic"] = pic_loss(q_p, q_pp, k_i, k_ip, self.image_queue_, w.tau)
                    parts["umc"] = umc_loss(q_p, k_pp, q_i, k_ip, self.point_queue_, self.image_queue_, w.tau)
                total = total_loss(parts, w)
            if not math.isfinite(total.item()):
                raise NonFiniteError(f"total loss is {total.item()}")
            tape.backward(total)
        except (NonFiniteError, FloatingPointError) as exc:
            self._dump_nonfinite(ds, idx, exc)
            raise
        if cfg.optim.grad_clip > 0:
            nx.clip_grad_norm(self.optimizer_.params, cfg.optim.grad_clip)
        self.optimizer_.step(lr=lr)
        tape.clear()
        if use_contrast:
            for online, ema in mom.pairs(model):
                momentum_update(online, ema, w.momentum)
            self.point_queue_.push(k_pp)
            self.image_queue_.push(k_ip)

        pred = logits.data.argmax(-1)
        top1 = float((pred == p_d.argmax(-1))[mask].mean())
        record = MetricsRecord(
            step=self.step_,
            lr=lr,
            mcm=parts["mcm"].item(),
            pic=parts["pic"].item() if "pic" in parts else 0.0,
            umc=parts["umc"].item() if "umc" in parts else 0.0,
            total=total.item(),
            top1=top1,
            wall=time.perf_counter() - t0,
        )
        self.step_ += 1
        return record

    def _dump_nonfinite(self, ds: PairDataset, idx, exc) -> None:
        info = {
            "step": self.step_,
            "batch_indices": [int(i) for i in idx],
            "sample_seeds": [int(ds.seeds[i]) for i in idx],
            "master_seed": int(ds.master_seed),
            "error": str(exc),
        }
        logger.error("non-finite loss at step %d: %s", self.step_, json.dumps(info))
        out = Path(self._cfg().output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"nonfinite_step{self.step_}.json").write_text(json.dumps(info, indent=2) + "\n")
        except OSError:
            pass
        self.last_failure_ = info

    # ------------------------------------------------------------ inference

    def encode_points(self, clouds, batch: int = 64):
        """Unmasked point encoder outputs as numpy (z_cls (n, D), z_patches (n, g, D))."""
        check_is_fitted(self, "model_")
        cfg = self._cfg()
        clouds = _check_clouds(clouds)
        cls_out, patch_out = [], []
        for i in range(0, len(clouds), batch):
            patches, centers = group_clouds(clouds[i : i + batch], cfg.groups.num_groups, cfg.groups.group_size)
            out = self.model_.point_encoder(patches, centers)
            cls_out.append(out.z_cls.data)
            patch_out.append(out.z_patches.data)
        return np.concatenate(cls_out), np.concatenate(patch_out)

    def transform(self, X) -> np.ndarray:
        """Frozen features [z_cls || elementwise max over patch tokens], shape (n, 2D)."""
        z_cls, z_patches = self.encode_points(X)
        return np.concatenate([z_cls, z_patches.max(axis=1)], axis=1)

    def token_logits(self, patches, centers, mask, images=None) -> np.ndarray:
        """Vocabulary logits (B, g, V) along the same path training used.

        The fused ICE path needs ``images``; the mask-modeling-only
        configuration reads the point stream directly and ignores them.
        """
        check_is_fitted(self, "model_")
        out_p = self.model_.point_encoder(patches, centers, mask)
        if self._cfg().losses.unimodal:
            return self.model_.token_head(out_p.z_patches).data
        if images is None:
            raise ValueError("the cross-modal token head needs paired images")
        out_i = self.model_.image_encoder(np.asarray(images, np.float32))
        return self.model_.token_head(self.model_.ice(out_p.z_patches, out_i.z_patches)).data

    def similarity(self, clouds, images, batch: int = 64) -> np.ndarray:
        """s(P, I) for aligned rows of clouds and images."""
        check_is_fitted(self, "model_")
        z_p, _ = self.encode_points(clouds, batch)
        images = np.asarray(images, np.float32)
        out = []
        for i in range(0, len(images), batch):
            z_i = self.model_.image_encoder(images[i : i + batch]).z_cls
            f_p = self.model_.point_proj(nx.tensor(z_p[i : i + batch]))
            f_i = self.model_.image_proj(z_i)
            out.append((f_p * f_i).sum(axis=-1).data)
        return np.concatenate(out)

    # ------------------------------------------------------------ persistence

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        cfg = self._cfg()
        tensors = {}
        for prefix, module in (("model.", self.model_), ("momentum.", self.momentum_), ("dvae.", self.tokenizer_.model_)):
            for name, p in module.named_parameters():
                tensors[prefix + name] = p.data
        st = self.optimizer_.state
        return Checkpoint(
            config={"run": cfg.to_dict(), "tokenizer": self.tokenizer_.get_params()},
            tensors=tensors,
            optimizer_meta={
                "lr": st.lr,
                "weight_decay": st.weight_decay,
                "betas": [st.beta1, st.beta2],
                "eps": st.eps,
                "step": st.step,
            },
            optimizer_tensors=self.optimizer_.state_dict(),
            queue_meta={
                "point": {"cursor": self.point_queue_.cursor, "filled": self.point_queue_.filled},
                "image": {"cursor": self.image_queue_.cursor, "filled": self.image_queue_.filled},
            },
            queue_tensors={"point": self.point_queue_.buffer, "image": self.image_queue_.buffer},
            rng_state=rng_to_json(self.rng_),
            step=self.step_,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, metrics_path=None) -> "CrossModalPretrainer":
        cfg = RunConfig.from_dict(ckpt.config["run"])
        groups = _split_prefixed(ckpt.tensors)
        tokenizer = DVAETokenizer.from_state(ckpt.config["tokenizer"], groups.get("dvae", {}))
        est = cls(config=cfg, metrics_path=metrics_path)
        est._init_state(tokenizer)
        est.model_.load_state_dict(groups.get("model", {}))
        est.momentum_.load_state_dict(groups.get("momentum", {}))
        est.momentum_.freeze()
        meta = ckpt.optimizer_meta
        st = est.optimizer_.state
        st.lr, st.weight_decay, st.eps = meta["lr"], meta["weight_decay"], meta["eps"]
        st.beta1, st.beta2 = meta["betas"]
        est.optimizer_.load_state_dict(ckpt.optimizer_tensors, meta["step"])
        for name, queue in (("point", est.point_queue_), ("image", est.image_queue_)):
            queue.load_state(ckpt.queue_tensors[name], **ckpt.queue_meta[name])
        est.rng_ = rng_from_json(ckpt.rng_state)
        est.step_ = int(ckpt.step)
        return est

    def save(self, path) -> Path:
        return save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def load(cls, path) -> "CrossModalPretrainer":
        return cls.from_checkpoint(load_checkpoint(path))


def _split_prefixed(tensors: dict) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for name, arr in tensors.items():
        head, _, rest = name.partition(".")
        out.setdefault(head, {})[rest] = arr
    return out


# ---------------------------------------------------------------- tokenizer checkpoints


def tokenizer_for(config: RunConfig) -> DVAETokenizer:
    d, t, g = config.dvae, config.dvae_train, config.groups
    return DVAETokenizer(
        n_groups=g.num_groups,
        group_size=g.group_size,
        vocab_size=d.vocab_size,
        token_dim=d.token_dim,
        depth=d.depth,
        width=d.width,
        edge_k=d.edge_k,
        hidden=d.hidden,
        n_steps=t.steps,
        batch_size=t.batch_size,
        lr=t.lr,
        weight_decay=t.weight_decay,
        warmup_steps=t.warmup_steps,
        tau_start=d.tau_start,
        tau_end=d.tau_end,
        kl_weight=d.kl_weight,
        random_state=config.seed,
    )


def save_tokenizer(tokenizer: DVAETokenizer, config: RunConfig, path) -> Path:
    check_is_fitted(tokenizer, "model_")
    opt = getattr(tokenizer, "optimizer_", None)
    meta = {}
    if opt is not None:
        st = opt.state
        meta = {"lr": st.lr, "weight_decay": st.weight_decay, "betas": [st.beta1, st.beta2], "eps": st.eps, "step": st.step}
    ckpt = Checkpoint(
        config={"run": config.to_dict(), "tokenizer": tokenizer.get_params()},
        tensors={"dvae." + n: p.data for n, p in tokenizer.model_.named_parameters()},
        optimizer_meta=meta,
        optimizer_tensors=opt.state_dict() if opt is not None else {},
        rng_state={},
        step=len(getattr(tokenizer, "history_", [])),
    )
    return save_checkpoint(ckpt, path)


def load_tokenizer(path) -> DVAETokenizer:
    ckpt = load_checkpoint(path)
    if "tokenizer" not in ckpt.config:
        raise ValueError(f"{path} does not contain a tokenizer")
    return DVAETokenizer.from_state(ckpt.config["tokenizer"], _split_prefixed(ckpt.tensors).get("dvae", {}))


# ---------------------------------------------------------------- entry point


def pretrain(config: RunConfig, dataset: PairDataset | None = None, tokenizer: DVAETokenizer | None = None):
    """Run pretraining end to end and write checkpoint, metrics JSONL/CSV and a loss curve.

    ``dataset`` and ``tokenizer`` default to ``config.data.path`` and
    ``config.dvae_train.checkpoint``.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        if not config.data.path:
            raise ValueError("config.data.path is not set and no dataset was given")
        dataset = load_dataset(config.data.path)
    if tokenizer is None:
        ckpt_path = config.dvae_train.checkpoint
        if not ckpt_path or not Path(ckpt_path).exists():
            raise FileNotFoundError(f"dVAE checkpoint not found: {ckpt_path!r}; run train-dvae first")
        tokenizer = load_tokenizer(ckpt_path)
    est = CrossModalPretrainer(config=config, metrics_path=out / "metrics.jsonl")
    est.fit(dataset, tokenizer=tokenizer)
    est.save(out / "model.xbrt")
    write_csv(est.history_, out / "metrics.csv")
    loss_curve_svg(est.history_, out / "loss.svg")
    config.save(out / "config.json")
    return est


__all__ = [
    "CrossModalPretrainer",
    "group_clouds",
    "pretrain",
    "tokenizer_for",
    "save_tokenizer",
    "load_tokenizer",
]
