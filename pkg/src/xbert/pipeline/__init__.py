"""Orchestration: configuration, training loop, checkpoints, metrics, evaluation and CLI."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, override
from .evaluate import LinearProbe, alignment_margin, extract_features, linear_probe, random_token_baseline, reconstruct_masked
from .metrics import MetricsRecord, MetricsWriter, read_jsonl
from .train import CrossModalPretrainer, load_tokenizer, pretrain, save_tokenizer, tokenizer_for

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "RunConfig",
    "override",
    "LinearProbe",
    "alignment_margin",
    "extract_features",
    "linear_probe",
    "random_token_baseline",
    "reconstruct_masked",
    "MetricsRecord",
    "MetricsWriter",
    "read_jsonl",
    "CrossModalPretrainer",
    "load_tokenizer",
    "pretrain",
    "save_tokenizer",
    "tokenizer_for",
]
