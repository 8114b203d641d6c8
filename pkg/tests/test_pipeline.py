import json
import struct

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from xbert.geometry import read_xyz
from xbert.numerics import NonFiniteError
from xbert.pipeline import cli
from xbert.pipeline.checkpoint import (
    MAGIC,
    VERSION,
    Checkpoint,
    CheckpointError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from xbert.pipeline.config import RunConfig, override
from xbert.pipeline.evaluate import (
    LinearProbe,
    alignment_margin,
    derangement,
    extract_features,
    linear_probe,
    random_token_baseline,
    reconstruct_masked,
)
from xbert.pipeline.metrics import MetricsRecord, MetricsWriter, loss_curve_svg, read_jsonl, write_csv
from xbert.pipeline.train import CrossModalPretrainer, load_tokenizer, save_tokenizer, tokenizer_for
from xbert.synthdata import PairDataset, generate_dataset, save_dataset

UNIMODAL = {"losses.alpha": 1.0, "losses.beta": 0.0, "losses.zeta": 0.0}


def small_config(**extra) -> RunConfig:
    base = {
        "optim.steps": 4,
        "optim.batch_size": 6,
        "optim.warmup_steps": 1,
        "dvae_train.steps": 3,
        "queue_size": 16,
    }
    base.update(extra)
    return override(RunConfig(), base)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(12, 5)


@pytest.fixture(scope="module")
def tokenizer(dataset):
    return tokenizer_for(small_config()).fit(dataset.P)


@pytest.fixture(scope="module")
def trained(dataset, tokenizer):
    return CrossModalPretrainer(small_config()).fit(dataset, tokenizer=tokenizer)


# ---------------------------------------------------------------- config


def test_config_json_round_trip_is_lossless(tmp_path):
    cfg = small_config(**{"data.pose": "upright", "losses.alpha": 0.3, "seed": 9})
    assert RunConfig.from_json(cfg.to_json()) == cfg
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_config_rejects_unknown_fields_and_bad_combinations():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"optim": {"learning_rate": 1.0}})
    with pytest.raises(ValueError, match="unknown config field"):
        override(RunConfig(), {"optim.nope": 1})
    with pytest.raises(ValueError, match="grid size"):
        override(RunConfig(), {"groups.group_size": 16})
    with pytest.raises(ValueError, match="divisible"):
        override(RunConfig(), {"data.image_patch": 5})


# ---------------------------------------------------------------- checkpoint format


def _toy_checkpoint() -> Checkpoint:
    return Checkpoint(
        config={"b": 1, "a": [1, 2]},
        tensors={"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5).reshape(())},
        optimizer_meta={"step": 3},
        optimizer_tensors={"exp_avg.w": np.ones((2, 3), np.float32)},
        queue_meta={"point": {"cursor": 1, "filled": 1}},
        queue_tensors={"point": np.eye(2, dtype=np.float32)},
        rng_state={"bit_generator": "PCG64"},
        step=7,
    )


def test_checkpoint_layout_is_explicit_little_endian():
    raw = encode(_toy_checkpoint())
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == VERSION
    (n,) = struct.unpack("<I", raw[8:12])
    assert json.loads(raw[12 : 12 + n]) == {"a": [1, 2], "b": 1}
    # first tensor payload: w = 0..5 as <f4
    assert np.arange(6, dtype="<f4").tobytes() in raw
    assert struct.unpack("<Q", raw[-8:])[0] == 7


def test_checkpoint_round_trip_byte_identical(tmp_path):
    ckpt = _toy_checkpoint()
    save_checkpoint(ckpt, tmp_path / "a.xbrt")
    again = load_checkpoint(tmp_path / "a.xbrt")
    assert encode(again) == encode(ckpt)
    np.testing.assert_array_equal(again.tensors["w"], ckpt.tensors["w"])
    assert again.tensors["s"].shape == ()


@pytest.mark.parametrize("cut", [1, 2, 9, 40, 100])
def test_truncated_checkpoint_is_rejected(cut):
    raw = encode(_toy_checkpoint())
    with pytest.raises(CheckpointError, match="truncated"):
        decode(raw[:-cut])


def test_corrupt_magic_version_and_trailing_bytes_rejected(tmp_path):
    raw = encode(_toy_checkpoint())
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XBRU" + raw[4:])
    with pytest.raises(CheckpointError, match="version 2"):
        decode(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(raw + b"\0")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.xbrt")


def test_checkpoint_rejects_integer_tensors():
    with pytest.raises(CheckpointError, match="floating"):
        encode(Checkpoint(config={}, tensors={"i": np.arange(3)}))


def test_failed_save_leaves_previous_file_intact(tmp_path):
    path = tmp_path / "c.xbrt"
    save_checkpoint(_toy_checkpoint(), path)
    before = path.read_bytes()
    with pytest.raises(CheckpointError):
        save_checkpoint(Checkpoint(config={}, tensors={"i": np.arange(3)}), path)
    assert path.read_bytes() == before


# ---------------------------------------------------------------- metrics


def _record(step, total=1.0):
    return MetricsRecord(step, 1e-3, 0.5, 0.2, 0.3, total, 0.1, 0.01 * step)


def test_metrics_stream_is_monotonic_and_readable_mid_run(tmp_path):
    path = tmp_path / "m.jsonl"
    w = MetricsWriter(path)
    w.append(_record(0))
    assert read_jsonl(path) == [_record(0)]
    w.append(_record(1, 0.5))
    assert [r.step for r in read_jsonl(path)] == [0, 1]
    with pytest.raises(ValueError, match="not after"):
        w.append(_record(1))


def test_csv_and_svg_summaries(tmp_path):
    recs = [_record(i, 2.0 - 0.1 * i) for i in range(5)]
    write_csv(recs, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,lr,mcm,pic,umc,total,top1,wall" and len(lines) == 6
    loss_curve_svg(recs, tmp_path / "m.svg")
    svg = (tmp_path / "m.svg").read_text()
    assert svg.startswith("<svg") and "<polyline" in svg


# ---------------------------------------------------------------- training loop


def test_fit_records_one_metrics_line_per_step(dataset, tokenizer, tmp_path):
    est = CrossModalPretrainer(small_config(), metrics_path=tmp_path / "m.jsonl").fit(dataset, tokenizer=tokenizer)
    recs = read_jsonl(tmp_path / "m.jsonl")
    assert recs == est.history_
    assert [r.step for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert np.isfinite([r.mcm, r.pic, r.umc, r.total]).all()
        assert 0.0 <= r.top1 <= 1.0
    cfg = small_config()
    expected = recs[-1].mcm + cfg.losses.beta * recs[-1].pic + cfg.losses.zeta * recs[-1].umc
    assert recs[-1].total == pytest.approx(expected, rel=1e-5)


def test_identical_seed_gives_identical_checkpoints_and_metrics(dataset, tokenizer, trained):
    again = CrossModalPretrainer(small_config()).fit(dataset, tokenizer=tokenizer)
    assert encode(again.to_checkpoint()) == encode(trained.to_checkpoint())
    assert [(r.total, r.top1) for r in again.history_] == [(r.total, r.top1) for r in trained.history_]
    other = CrossModalPretrainer(small_config(seed=1)).fit(dataset, tokenizer=tokenizer)
    assert encode(other.to_checkpoint()) != encode(trained.to_checkpoint())


def test_queues_and_momentum_advance(trained):
    cfg = small_config()
    assert trained.point_queue_.filled == min(cfg.queue_size, cfg.optim.steps * cfg.optim.batch_size)
    assert trained.image_queue_.warm
    online = dict(trained.model_.point_encoder.named_parameters())
    ema = dict(trained.momentum_.point_encoder.named_parameters())
    assert all(not p.requires_grad for p in ema.values())
    name = next(iter(online))
    assert not np.array_equal(online[name].data, ema[name].data)


def test_unimodal_configuration_never_reads_images(dataset, tokenizer):
    ds = PairDataset(dataset.P, dataset.P_plus, dataset._I, dataset._I_plus, dataset.labels, dataset.seeds, dataset.views)
    est = CrossModalPretrainer(small_config(**UNIMODAL)).fit(ds, tokenizer=tokenizer)
    assert ds.image_reads == 0
    assert all(r.pic == 0.0 and r.umc == 0.0 and r.total == r.mcm for r in est.history_)


def test_unimodal_trace_is_independent_of_image_content(dataset, tokenizer):
    noise = np.random.default_rng(0).random(dataset._I.shape).astype(np.float32)
    scrambled = PairDataset(dataset.P, dataset.P_plus, noise, noise, dataset.labels, dataset.seeds, dataset.views)
    a = CrossModalPretrainer(small_config(**UNIMODAL)).fit(dataset, tokenizer=tokenizer)
    b = CrossModalPretrainer(small_config(**UNIMODAL)).fit(scrambled, tokenizer=tokenizer)
    assert [r.total for r in a.history_] == [r.total for r in b.history_]
    # the full configuration does see the images
    c = CrossModalPretrainer(small_config()).fit(dataset, tokenizer=tokenizer)
    d = CrossModalPretrainer(small_config()).fit(scrambled, tokenizer=tokenizer)
    assert [r.total for r in c.history_] != [r.total for r in d.history_]


def test_nonfinite_loss_aborts_with_seed_dump(dataset, tokenizer, tmp_path):
    class Poisoned(CrossModalPretrainer):
        def _init_state(self, tok):
            super()._init_state(tok)
            self.model_.token_head.parameters()[0].data[:] = np.inf

    cfg = small_config(output_dir=str(tmp_path))
    with pytest.raises((NonFiniteError, FloatingPointError)):
        Poisoned(cfg).fit(dataset, tokenizer=tokenizer)
    dumps = list(tmp_path.glob("nonfinite_step*.json"))
    assert len(dumps) == 1
    info = json.loads(dumps[0].read_text())
    assert info["step"] == 0 and info["master_seed"] == dataset.master_seed
    assert len(info["sample_seeds"]) == cfg.optim.batch_size
    assert set(info["sample_seeds"]) <= {int(s) for s in dataset.seeds}


def test_fit_validates_inputs(dataset, tokenizer):
    with pytest.raises(TypeError):
        CrossModalPretrainer(small_config()).fit(dataset.P, tokenizer=tokenizer)
    with pytest.raises(NotFittedError):
        CrossModalPretrainer(small_config()).fit(dataset, tokenizer=tokenizer_for(small_config()))
    with pytest.raises(ValueError, match="vocabulary"):
        CrossModalPretrainer(small_config(**{"dvae.vocab_size": 64})).fit(dataset, tokenizer=tokenizer)
    with pytest.raises(ValueError, match="image_size"):
        CrossModalPretrainer(small_config(**{"data.image_size": 16})).fit(dataset, tokenizer=tokenizer)


def test_estimator_params_and_clone(trained):
    params = trained.get_params()
    assert set(params) == {"config", "metrics_path"}
    fresh = clone(trained)
    assert fresh.config == trained.config
    with pytest.raises(NotFittedError):
        fresh.transform(np.zeros((1, 256, 3), np.float32))


# ---------------------------------------------------------------- persistence of a trained model


def test_save_load_reproduces_forward_outputs_bit_exactly(trained, dataset, tmp_path):
    path = trained.save(tmp_path / "model.xbrt")
    loaded = CrossModalPretrainer.load(path)
    np.testing.assert_array_equal(loaded.transform(dataset.P[:4]), trained.transform(dataset.P[:4]))
    imgs = dataset.images(np.arange(4))[0]
    np.testing.assert_array_equal(loaded.similarity(dataset.P[:4], imgs), trained.similarity(dataset.P[:4], imgs))
    save_checkpoint(loaded.to_checkpoint(), tmp_path / "again.xbrt")
    assert (tmp_path / "again.xbrt").read_bytes() == path.read_bytes()


def test_resumed_state_continues_identically(trained, dataset):
    """Loaded optimizer, queues and RNG reproduce the next step of the original."""
    loaded = CrossModalPretrainer.from_checkpoint(trained.to_checkpoint())
    a, b = clone_state(trained), loaded
    idx = np.arange(6)
    ra = a._train_step(dataset, idx, 0.0)
    rb = b._train_step(dataset, idx, 0.0)
    assert (ra.total, ra.top1, ra.lr) == (rb.total, rb.top1, rb.lr)
    assert encode(a.to_checkpoint()) == encode(b.to_checkpoint())


def clone_state(est):
    return CrossModalPretrainer.from_checkpoint(est.to_checkpoint())


def test_tokenizer_checkpoint_round_trip(tokenizer, dataset, tmp_path):
    save_tokenizer(tokenizer, small_config(), tmp_path / "dvae.xbrt")
    loaded = load_tokenizer(tmp_path / "dvae.xbrt")
    np.testing.assert_array_equal(loaded.transform(dataset.P[:3]), tokenizer.transform(dataset.P[:3]))
    assert loaded.get_params() == tokenizer.get_params()


def test_load_tokenizer_rejects_other_checkpoints(tmp_path):
    save_checkpoint(Checkpoint(config={"run": {}}, tensors={}), tmp_path / "x.xbrt")
    with pytest.raises(ValueError, match="tokenizer"):
        load_tokenizer(tmp_path / "x.xbrt")


# ---------------------------------------------------------------- features


def test_features_have_twice_the_hidden_dim_and_are_deterministic(trained, dataset):
    f = extract_features(trained, dataset.P[:3])
    assert f.shape == (3, 2 * trained.config.point_encoder.dim)
    np.testing.assert_array_equal(f, extract_features(trained, dataset.P[:3]))
    single = extract_features(trained, dataset.P[0])
    np.testing.assert_array_equal(single[0], f[0])


def test_features_are_not_rotation_invariant(trained, dataset):
    c, s = np.cos(0.7), np.sin(0.7)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], np.float32)
    a = extract_features(trained, dataset.P[:1])
    b = extract_features(trained, dataset.P[:1] @ rot.T)
    assert not np.allclose(a, b, atol=1e-4)


def test_transform_rejects_malformed_clouds(trained):
    with pytest.raises(ValueError, match="shape"):
        trained.transform(np.zeros((2, 10, 2)))
    bad = np.zeros((1, 256, 3))
    bad[0, 3, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        trained.transform(bad)


# ---------------------------------------------------------------- linear probe


def _blobs(rng, n_per, k, dim, spread):
    centers = rng.normal(size=(k, dim)) * spread
    X = np.concatenate([centers[c] + rng.normal(size=(n_per, dim)) for c in range(k)])
    y = np.repeat(np.arange(k), n_per)
    return X, y


def test_probe_separable_toy_is_perfect(rng):
    X, y = _blobs(rng, 40, 2, 5, 20.0)
    split = np.tile([True, False], 40)
    assert linear_probe(X, y, split) == 1.0


def test_probe_with_shuffled_labels_is_near_chance(rng):
    X, y = _blobs(rng, 100, 4, 8, 3.0)
    y = rng.permutation(y)
    split = np.zeros(len(y), bool)
    split[rng.permutation(len(y))[:200]] = True
    acc = linear_probe(X, y, split)
    assert abs(acc - 0.25) <= 0.10


def test_probe_predictions_invariant_to_feature_scale(rng):
    X, y = _blobs(rng, 50, 3, 6, 1.5)
    train = np.arange(len(y)) % 2 == 0
    base = LinearProbe().fit(X[train], y[train]).predict(X[~train])
    for scale in (1e-3, 7.0, 1e3):
        scaled = LinearProbe().fit(scale * X[train], y[train]).predict(scale * X[~train])
        assert (scaled != base).sum() <= 1


def test_probe_index_split_matches_mask_split(rng):
    X, y = _blobs(rng, 20, 3, 4, 2.0)
    mask = np.arange(len(y)) % 3 != 0
    assert linear_probe(X, y, mask) == linear_probe(X, y, (np.flatnonzero(mask), np.flatnonzero(~mask)))


def test_probe_degenerate_splits_raise(rng):
    X, y = _blobs(rng, 5, 2, 3, 1.0)
    with pytest.raises(ValueError, match="two classes"):
        LinearProbe().fit(X[:5], y[:5])
    with pytest.raises(ValueError, match="fewer than two"):
        LinearProbe().fit(X[:6], y[:6])
    with pytest.raises(ValueError, match="empty test"):
        linear_probe(X, y, np.ones(len(y), bool))


def test_probe_is_a_sklearn_classifier(rng):
    X, y = _blobs(rng, 10, 2, 3, 5.0)
    probe = clone(LinearProbe(C=0.5)).fit(X, y)
    assert probe.get_params()["C"] == 0.5
    assert probe.decision_function(X).shape == (20,)
    assert probe.score(X, y) == 1.0
    np.testing.assert_array_equal(probe.classes_, [0, 1])


# ---------------------------------------------------------------- alignment


def test_derangement_has_no_fixed_points(rng):
    for n in (2, 3, 10, 64):
        p = derangement(n, rng)
        assert sorted(p) == list(range(n))
        assert (p != np.arange(n)).all()
    with pytest.raises(ValueError):
        derangement(1, rng)


def test_alignment_report_is_consistent_with_similarity(trained, dataset):
    imgs = dataset.images(np.arange(8))[0]
    rep = alignment_margin(trained, dataset.P[:8], imgs, np.random.default_rng(0))
    assert rep.matched == pytest.approx(trained.similarity(dataset.P[:8], imgs).mean())
    assert rep.margin == pytest.approx(rep.matched - rep.shuffled)
    assert -1.0 <= rep.shuffled <= 1.0


# ---------------------------------------------------------------- reconstruction


def test_zero_mask_reconstruction_equals_tokenizer_round_trip(trained, tokenizer, dataset):
    r = reconstruct_masked(trained, dataset.P[0], 0.0, np.random.default_rng(0))
    assert not r.mask.any()
    np.testing.assert_array_equal(r.reconstructed, tokenizer.reconstruct(dataset.P[:1])[0])


def test_reconstruction_cardinality_and_exports(trained, dataset, tmp_path):
    cfg = trained.config
    r = reconstruct_masked(trained, dataset.P[1], 0.45, np.random.default_rng(0), out_dir=tmp_path)
    g, m = cfg.groups.num_groups, cfg.dvae.grid_size
    assert r.reconstructed.shape == (g * m, 3)
    assert r.mask.sum() == 7  # round(0.45 * 16)
    assert r.visible.shape == ((g - 7) * cfg.groups.group_size, 3)
    for name, arr in (("original", r.original), ("masked", r.visible), ("reconstructed", r.reconstructed)):
        back = read_xyz(tmp_path / f"{name}.xyz").points
        np.testing.assert_allclose(back, arr, rtol=1e-6, atol=1e-7)


def test_unmasked_tokens_keep_tokenizer_argmax(trained, tokenizer, dataset):
    r = reconstruct_masked(trained, dataset.P[2], 0.45, np.random.default_rng(3))
    ids = tokenizer.transform(dataset.P[2:3])[0].argmax(-1)
    np.testing.assert_array_equal(r.token_ids[~r.mask], ids[~r.mask])


def test_random_token_baseline_only_changes_masked_ids(trained, dataset):
    r = reconstruct_masked(trained, dataset.P[3], 0.0, np.random.default_rng(0))
    # nothing masked: the baseline is the same reconstruction
    assert random_token_baseline(trained, dataset.P[3], r, np.random.default_rng(1)) == r.chamfer


def test_unimodal_reconstruction_needs_no_image(dataset, tokenizer):
    est = CrossModalPretrainer(small_config(**UNIMODAL)).fit(dataset, tokenizer=tokenizer)
    r = reconstruct_masked(est, dataset.P[0], 0.45, np.random.default_rng(0))
    assert r.mask.sum() == 7 and np.isfinite(r.chamfer)


# ---------------------------------------------------------------- CLI


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_end_to_end(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    code, out, _ = _run(capsys, "gen-data", "--out", str(data), "--count", "12", "--seed", "3")
    assert code == 0 and json.loads(out)["count"] == 12
    assert (data / "manifest.json").exists()

    common = ["--output_dir", str(run), "--dvae_train.steps", "2", "--optim.steps", "3", "--optim.batch_size", "4"]
    code, out, _ = _run(capsys, "train-dvae", "--data", str(data), *common)
    assert code == 0 and (run / "dvae.xbrt").exists()
    assert json.loads(out)["final_chamfer"] > 0

    code, out, _ = _run(capsys, "pretrain", "--data", str(data), *common)
    assert code == 0, out
    assert json.loads(out)["steps"] == 3
    for name in ("model.xbrt", "metrics.jsonl", "metrics.csv", "loss.svg", "config.json"):
        assert (run / name).exists(), name
    assert len(read_jsonl(run / "metrics.jsonl")) == 3
    saved = RunConfig.load(run / "config.json")
    assert saved.optim.steps == 3 and saved.data.path == str(data)

    code, out, _ = _run(capsys, "inspect-ckpt", str(run / "model.xbrt"))
    info = json.loads(out)
    assert code == 0 and info["step"] == 3 and info["version"] == VERSION
    assert set(info["groups"]) == {"model", "momentum", "dvae"}
    assert info["config"]["run"]["optim"]["steps"] == 3

    code, out, _ = _run(capsys, "probe", "--ckpt", str(run / "model.xbrt"), "--data", str(data))
    res = json.loads(out)
    assert code == 0 and 0.0 <= res["accuracy"] <= 1.0 and res["train"] + res["test"] == 12

    code, out, _ = _run(
        capsys, "reconstruct", "--ckpt", str(run / "model.xbrt"), "--data", str(data), "--out", str(tmp_path / "rec")
    )
    res = json.loads(out)
    assert code == 0 and res["points"] == 16 * 32 and res["masked_patches"] == 7
    assert (tmp_path / "rec" / "reconstructed.xyz").exists()


def test_cli_config_file_and_seed_override(tmp_path):
    cfg = small_config(**{"optim.lr": 0.01})
    cfg.save(tmp_path / "c.json")
    args = cli.build_parser().parse_args(["pretrain", "--config", str(tmp_path / "c.json"), "--seed", "42", "--optim.steps", "9"])
    resolved = cli.resolve_config(args)
    assert resolved.optim.lr == 0.01 and resolved.seed == 42 and resolved.optim.steps == 9


def test_cli_bool_flags_parse(tmp_path):
    args = cli.build_parser().parse_args(["train-dvae", "--dvae.straight_through", "true"])
    assert cli.resolve_config(args).dvae.straight_through is True
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train-dvae", "--dvae.straight_through", "maybe"])


def test_cli_reports_missing_tokenizer(tmp_path, capsys):
    data = tmp_path / "data"
    save_dataset(generate_dataset(4, 0), data)
    code, _, err = _run(capsys, "pretrain", "--data", str(data), "--output_dir", str(tmp_path / "run"))
    assert code == 2 and "train-dvae" in err


def test_cli_inspect_rejects_truncated_file(tmp_path, capsys):
    raw = encode(_toy_checkpoint())
    (tmp_path / "t.xbrt").write_bytes(raw[:-3])
    code, _, err = _run(capsys, "inspect-ckpt", str(tmp_path / "t.xbrt"))
    assert code == 2 and "truncated" in err
