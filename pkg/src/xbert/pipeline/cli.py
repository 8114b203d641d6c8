"""Command line entry point: ``xbert <subcommand> [--config FILE] [--seed N] [--section.field VALUE ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..synthdata import generate_dataset, load_dataset, save_dataset
from .checkpoint import CheckpointError, VERSION, load_checkpoint
from .config import RunConfig, override
from .evaluate import extract_features, linear_probe, random_token_baseline, reconstruct_masked
from .train import CrossModalPretrainer, load_tokenizer, pretrain, save_tokenizer, tokenizer_for

log = logging.getLogger("xbert")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in d.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[prefix + key] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _config_flags() -> argparse.ArgumentParser:
    """Parent parser with one ``--section.field`` flag per RunConfig leaf."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="JSON RunConfig file")
    parent.add_argument("--seed", type=int, help="master seed override")
    parent.add_argument("-v", "--verbose", action="store_true")
    group = parent.add_argument_group("config overrides")
    for key, default in _flatten(RunConfig().to_dict()).items():
        if key == "seed":
            continue
        if isinstance(default, bool):
            kind = _parse_bool
        elif isinstance(default, (int, float)):
            kind = type(default)
        else:
            kind = str
        group.add_argument(f"--{key}", dest=f"cfg:{key}", type=kind, default=None, metavar=kind.__name__.strip("_").upper())
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = argparse.ArgumentParser(prog="xbert", description="Cross-modal masked point-cloud pretraining at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[parent], help="generate a procedural point/image pair dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, help="number of pairs (default data.num_samples)")

    p = sub.add_parser("train-dvae", parents=[parent], help="train the discrete tokenizer")
    p.add_argument("--data", type=Path, help="dataset directory; generated on the fly when omitted")
    p.add_argument("--out", type=Path, help="tokenizer checkpoint (default OUTPUT_DIR/dvae.xbrt)")

    p = sub.add_parser("pretrain", parents=[parent], help="cross-modal pretraining")
    p.add_argument("--data", type=Path)
    p.add_argument("--dvae", type=Path, help="tokenizer checkpoint from train-dvae")

    p = sub.add_parser("probe", parents=[parent], help="linear probe on frozen features")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--train-fraction", type=float, default=0.5, help="per-class share used for training")

    p = sub.add_parser("reconstruct", parents=[parent], help="masked reconstruction of one cloud")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=0.45)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("inspect-ckpt", help="summarize a checkpoint")
    p.add_argument("path", type=Path)
    p.add_argument("--tensors", action="store_true", help="list every tensor")
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return override(config, overrides) if overrides else config


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_gen_data(args, config: RunConfig) -> int:
    d = config.data
    count = args.count if args.count is not None else d.num_samples
    ds = generate_dataset(count, config.seed, d.n_points, d.image_size, d.image_size, pose=d.pose)
    save_dataset(ds, args.out)
    _emit({"out": str(args.out), "count": count, "class_counts": ds.class_counts()})
    return 0


def cmd_train_dvae(args, config: RunConfig) -> int:
    if args.data is not None:
        clouds = load_dataset(args.data).P
    elif config.data.path:
        clouds = load_dataset(config.data.path).P
    else:
        d = config.data
        clouds = generate_dataset(config.dvae_train.num_shapes, config.seed, d.n_points, pose=d.pose).P
    tok = tokenizer_for(config).fit(clouds)
    out = args.out or Path(config.output_dir) / "dvae.xbrt"
    save_tokenizer(tok, config, out)
    _emit(
        {
            "out": str(out),
            "initial_chamfer": tok.initial_chamfer_,
            "final_chamfer": tok.final_chamfer_,
            "codebook_entropy": tok.codebook_entropy_,
        }
    )
    return 0


def cmd_pretrain(args, config: RunConfig) -> int:
    changes = {}
    if args.data is not None:
        changes["data.path"] = str(args.data)
    if args.dvae is not None:
        changes["dvae_train.checkpoint"] = str(args.dvae)
    elif not config.dvae_train.checkpoint:
        changes["dvae_train.checkpoint"] = str(Path(config.output_dir) / "dvae.xbrt")
    config = override(config, changes)
    est = pretrain(config)
    h = est.history_
    _emit(
        {
            "out": str(Path(config.output_dir) / "model.xbrt"),
            "steps": len(h),
            "first_total": h[0].total if h else None,
            "final_total": h[-1].total if h else None,
            "final_top1": h[-1].top1 if h else None,
        }
    )
    return 0


def _stratified_split(labels: np.ndarray, fraction: float) -> np.ndarray:
    train = np.zeros(len(labels), bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        train[idx[: max(1, int(round(fraction * len(idx))))]] = True
    return train


def cmd_probe(args, config: RunConfig) -> int:
    est = CrossModalPretrainer.load(args.ckpt)
    ds = load_dataset(args.data)
    split = _stratified_split(ds.labels, args.train_fraction)
    acc = linear_probe(extract_features(est, ds.P), ds.labels, split)
    _emit({"accuracy": acc, "train": int(split.sum()), "test": int((~split).sum())})
    return 0


def cmd_reconstruct(args, config: RunConfig) -> int:
    est = CrossModalPretrainer.load(args.ckpt)
    ds = load_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise IndexError(f"index {args.index} outside dataset of {len(ds)}")
    rng = np.random.default_rng(config.seed)
    image = ds.images([args.index])[0][0]
    r = reconstruct_masked(est, ds.P[args.index], args.mask_ratio, rng, image=image, out_dir=args.out)
    baseline = random_token_baseline(est, ds.P[args.index], r, rng)
    _emit(
        {
            "out": str(args.out),
            "masked_patches": int(r.mask.sum()),
            "chamfer": r.chamfer,
            "random_token_chamfer": baseline,
            "points": len(r.reconstructed),
        }
    )
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.path)
    n_params = sum(int(np.prod(a.shape)) for a in ckpt.tensors.values())
    groups: dict[str, int] = {}
    for name in ckpt.tensors:
        head = name.split(".", 1)[0]
        groups[head] = groups.get(head, 0) + 1
    payload = {
        "path": str(args.path),
        "version": VERSION,
        "step": ckpt.step,
        "tensors": len(ckpt.tensors),
        "parameters": n_params,
        "groups": groups,
        "optimizer": ckpt.optimizer_meta,
        "queues": ckpt.queue_meta,
        "config": ckpt.config,
    }
    if args.tensors:
        payload["tensor_shapes"] = {k: list(v.shape) for k, v in ckpt.tensors.items()}
    _emit(payload)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dvae": cmd_train_dvae,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "inspect-ckpt":
            return cmd_inspect(args)
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (FileNotFoundError, CheckpointError, ValueError, IndexError) as exc:
        print(f"xbert {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
