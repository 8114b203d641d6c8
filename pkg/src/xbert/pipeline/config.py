"""Run configuration: nested dataclasses with a lossless JSON round trip."""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ..encoders import TransformerConfig
from ..objectives import LossWeights
from ..tokenizer import DvaeConfig


@dataclass
class DataConfig:
    path: str | None = None
    num_samples: int = 256
    n_points: int = 256
    image_size: int = 32
    image_patch: int = 8
    pose: str = "so3"


@dataclass
class GroupConfig:
    num_groups: int = 16
    group_size: int = 32


@dataclass
class DvaeTrainConfig:
    num_shapes: int = 200
    steps: int = 500
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 5e-4
    warmup_steps: int = 25
    checkpoint: str | None = None


@dataclass
class OptimConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 15
    grad_clip: float = 0.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    groups: GroupConfig = field(default_factory=GroupConfig)
    dvae: DvaeConfig = field(default_factory=DvaeConfig)
    dvae_train: DvaeTrainConfig = field(default_factory=DvaeTrainConfig)
    point_encoder: TransformerConfig = field(default_factory=TransformerConfig)
    image_encoder: TransformerConfig = field(default_factory=TransformerConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    queue_size: int = 256
    proj_dim: int = 32
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.point_encoder.dim != self.image_encoder.dim:
            raise ValueError("point and image encoders must share the hidden dim for fusion")
        if self.dvae.grid_size != self.groups.group_size:
            raise ValueError("dVAE grid size must equal the patch size")
        if self.data.image_size % self.data.image_patch:
            raise ValueError("image size must be divisible by the image patch size")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        factory = known[name].default_factory
        if factory is not MISSING and isinstance(value, dict) and is_dataclass(proto := factory()):
            kwargs[name] = _build(type(proto), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def override(config: RunConfig, dotted: dict) -> RunConfig:
    """Copy of ``config`` with ``{"optim.lr": 1e-3, ...}`` style overrides applied."""
    data = config.to_dict()
    for key, value in dotted.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config section {key!r}")
            node = node[part]
        if leaf not in node:
            raise ValueError(f"unknown config field {key!r}")
        node[leaf] = value
    return RunConfig.from_dict(data)


__all__ = ["DataConfig", "GroupConfig", "DvaeTrainConfig", "OptimConfig", "RunConfig", "override"]
