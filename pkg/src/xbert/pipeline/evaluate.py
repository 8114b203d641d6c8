"""Evaluation on frozen features: linear probe, point-image alignment, masked reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..geometry import chamfer, group_and_normalize, write_xyz
from ..objectives import sample_mask
from ..synthdata import render_depth
from .train import CrossModalPretrainer


def extract_features(pretrainer: CrossModalPretrainer, clouds) -> np.ndarray:
    """[z_cls || max over patch tokens] for each cloud, no masking; shape (n, 2D)."""
    return pretrainer.transform(clouds)


# ---------------------------------------------------------------- linear probe


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Standardized features into an L2-penalized multinomial logistic regression.

    The solver is full-batch L-BFGS run to ``tol``; standardization makes the
    fitted predictions invariant to rescaling the features.
    """

    def __init__(self, C: float = 1.0, max_iter: int = 2000, tol: float = 1e-6):
        self.C = C
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, counts = np.unique(y, return_counts=True)
        if len(classes) < 2:
            raise ValueError("linear probe needs at least two classes in the training split")
        if counts.min() < 2:
            raise ValueError(f"class {classes[counts.argmin()]!r} has fewer than two training samples")
        self.classes_ = unique_labels(y)
        self.scaler_ = StandardScaler().fit(X)
        self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter, tol=self.tol)
        self.clf_.fit(self.scaler_.transform(X), y)
        self.n_iter_ = int(np.max(self.clf_.n_iter_))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "clf_")
        X = check_array(X, dtype=np.float64)
        return self.clf_.decision_function(self.scaler_.transform(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "clf_")
        X = check_array(X, dtype=np.float64)
        return self.clf_.predict(self.scaler_.transform(X))


def linear_probe(features, labels, split, C: float = 1.0) -> float:
    """Held-out accuracy of :class:`LinearProbe`.

    ``split`` is a boolean train mask or a ``(train_idx, test_idx)`` pair.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    if isinstance(split, tuple):
        train, test = (np.asarray(s) for s in split)
    else:
        train = np.asarray(split, bool)
        if train.shape != labels.shape:
            raise ValueError("boolean split must match the label count")
        train, test = np.flatnonzero(train), np.flatnonzero(~train)
    if len(test) == 0:
        raise ValueError("empty test split")
    probe = LinearProbe(C=C).fit(features[train], labels[train])
    return float(probe.score(features[test], labels[test]))


# ---------------------------------------------------------------- alignment


@dataclass
class AlignmentReport:
    matched: float
    shuffled: float

    @property
    def margin(self) -> float:
        return self.matched - self.shuffled


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """A permutation with no fixed points: shift a random order by one."""
    if n < 2:
        raise ValueError("need at least two pairs to shuffle")
    order = rng.permutation(n)
    out = np.empty(n, np.int64)
    out[order] = np.roll(order, -1)
    return out


def alignment_margin(pretrainer: CrossModalPretrainer, clouds, images, rng) -> AlignmentReport:
    """Mean s(P, I) over matched pairs against a fixed-point-free shuffle of the images."""
    images = np.asarray(images, np.float32)
    perm = derangement(len(images), rng)
    matched = pretrainer.similarity(clouds, images)
    shuffled = pretrainer.similarity(clouds, images[perm])
    return AlignmentReport(float(matched.mean()), float(shuffled.mean()))


# ---------------------------------------------------------------- masked reconstruction


@dataclass
class Reconstruction:
    original: np.ndarray  # (N, 3)
    visible: np.ndarray  # points of unmasked patches
    reconstructed: np.ndarray  # (g * m, 3)
    mask: np.ndarray  # (g,) bool
    token_ids: np.ndarray  # (g,)
    chamfer: float


def _decode(pretrainer: CrossModalPretrainer, ids: np.ndarray, centers: np.ndarray) -> np.ndarray:
    dvae = pretrainer.tokenizer_.model_
    return dvae.decode(ids[None], centers[None]).data[0]


def reconstruct_masked(
    pretrainer: CrossModalPretrainer,
    cloud,
    mask_ratio: float,
    rng: np.random.Generator,
    image=None,
    out_dir=None,
) -> Reconstruction:
    """Mask patches, predict their tokens, and decode every patch back to points.

    Unmasked patches keep the tokenizer's argmax id; masked ones take the
    argmax of the token head. ``image`` pairs the cloud for the fused path and
    defaults to a view-0 depth render. With ``out_dir`` the original, visible
    and reconstructed clouds are written as XYZ.
    """
    check_is_fitted(pretrainer, "model_")
    cfg = pretrainer._cfg()
    pts = np.asarray(getattr(cloud, "points", cloud), np.float32)
    ps = group_and_normalize(pts, cfg.groups.num_groups, cfg.groups.group_size)
    mask = sample_mask(ps.g, mask_ratio, rng).as_bool()
    ids = pretrainer.tokenizer_.model_.tokenize(ps.patches[None]).data[0].argmax(-1)
    if mask.any():
        if image is None and not cfg.losses.unimodal:
            image = render_depth(pts, 0, cfg.data.image_size, cfg.data.image_size, cfg.data.image_patch).pixels
        images = None if image is None else np.asarray(image, np.float32)[None]
        logits = pretrainer.token_logits(ps.patches[None], ps.centers[None], mask[None], images)[0]
        ids = np.where(mask, logits.argmax(-1), ids)
    recon = _decode(pretrainer, ids, ps.centers)
    visible = ps.absolute()[~mask].reshape(-1, 3)
    result = Reconstruction(pts, visible, recon, mask, ids, chamfer(recon, pts))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_xyz(out / "original.xyz", pts)
        write_xyz(out / "masked.xyz", visible)
        write_xyz(out / "reconstructed.xyz", recon)
    return result


def random_token_baseline(pretrainer: CrossModalPretrainer, cloud, result: Reconstruction, rng) -> float:
    """Chamfer when the masked positions of ``result`` get uniformly random ids instead."""
    cfg = pretrainer._cfg()
    pts = np.asarray(getattr(cloud, "points", cloud), np.float32)
    ps = group_and_normalize(pts, cfg.groups.num_groups, cfg.groups.group_size)
    ids = result.token_ids.copy()
    ids[result.mask] = rng.integers(0, cfg.dvae.vocab_size, int(result.mask.sum()))
    return chamfer(_decode(pretrainer, ids, ps.centers), pts)


__all__ = [
    "extract_features",
    "LinearProbe",
    "linear_probe",
    "AlignmentReport",
    "alignment_margin",
    "derangement",
    "Reconstruction",
    "reconstruct_masked",
    "random_token_baseline",
]
