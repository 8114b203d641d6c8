"""Trainable model container: encoders, fusion, heads and the momentum branch."""

from __future__ import annotations

import copy

import numpy as np

from ..encoders import ImageEncoder, InteractiveCrossEncoder, PointEncoder, TokenHead
from ..numerics import Module
from ..objectives import ProjectionHead
from .config import RunConfig


class CrossModalModel(Module):
    """Online networks updated by the optimizer."""

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        pc, ic = config.point_encoder, config.image_encoder
        self.point_encoder = PointEncoder(pc, rng)
        self.image_encoder = ImageEncoder(ic, config.data.image_size, config.data.image_patch, rng)
        self.ice = InteractiveCrossEncoder(pc, rng)
        self.token_head = TokenHead(pc.dim, config.dvae.vocab_size, rng)
        self.point_proj = ProjectionHead(pc.dim, config.proj_dim, rng)
        self.image_proj = ProjectionHead(ic.dim, config.proj_dim, rng)


class MomentumBranch(Module):
    """EMA copies of the encoders and projection heads; never receives gradients."""

    def __init__(self, online: CrossModalModel):
        self.point_encoder = copy.deepcopy(online.point_encoder)
        self.image_encoder = copy.deepcopy(online.image_encoder)
        self.point_proj = copy.deepcopy(online.point_proj)
        self.image_proj = copy.deepcopy(online.image_proj)
        self.freeze()

    def pairs(self, online: CrossModalModel):
        """(online module, momentum module) pairs in a fixed order."""
        return [
            (online.point_encoder, self.point_encoder),
            (online.image_encoder, self.image_encoder),
            (online.point_proj, self.point_proj),
            (online.image_proj, self.image_proj),
        ]


__all__ = ["CrossModalModel", "MomentumBranch"]
