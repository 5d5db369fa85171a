import hashlib
from dataclasses import replace

import numpy as np
import pytest
import torch

from cacl.autoencoder import encode
from cacl.data import DatasetManifest, ManifestRecord, load_split, read_manifest, write_manifest
from cacl.training import (LOG_HEADER, TrainConfig, TrainState, batch_indices, format_config, generator_losses,
                           load_checkpoint, load_config, make_batch, parse_config_text, refresh_dead_codes,
                           save_checkpoint, train, train_step)

TINY = dict(dim=8, hidden=8, res_hidden=4, num_shared=4, num_class=4, batch_size=4, pool_capacity=4,
            dead_check_interval=5, eval_interval=2, checkpoint_interval=2)


def tiny_config(**kw):
    return TrainConfig(**{**TINY, **kw})


def tiny_batch(manifest_path, cfg, step=0):
    images, labels, _ = load_split(read_manifest(manifest_path), "train")
    return make_batch(images.astype(np.float32), labels, cfg, step)


def tensors_equal(a, b):
    if isinstance(a, torch.Tensor):
        return torch.equal(a, b)
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(tensors_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(tensors_equal(x, y) for x, y in zip(a, b))
    return a == b


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(w_map=-1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(steps=0)

    def test_parse(self):
        vals = parse_config_text("# comment\nw_map = 0.25\nflips = false  # trailing\nsteps=7\n")
        assert vals == {"w_map": 0.25, "flips": False, "steps": 7}

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            parse_config_text("learning_rate = 1\n")

    def test_roundtrip_and_overrides(self, tmp_path):
        cfg = tiny_config(seed=9)
        (tmp_path / "c.txt").write_text(format_config(cfg))
        assert load_config(tmp_path / "c.txt") == cfg
        assert load_config(tmp_path / "c.txt", steps=3, seed=None).steps == 3


def test_batches_are_stateless():
    a = batch_indices(10, 4, seed=1, step=5)
    b = batch_indices(10, 4, seed=1, step=5)
    assert np.array_equal(a, b) and len(a) == 4
    # one epoch covers distinct samples
    epoch = np.concatenate([batch_indices(12, 4, 0, s) for s in range(3)])
    assert sorted(epoch) == list(range(12))


def test_weight_gating_reports_zero(tiny_dataset):
    cfg = tiny_config(w_commit=0, w_codebook=0, w_map=0, w_cls=0)
    state = TrainState(cfg)
    x, y = tiny_batch(tiny_dataset, cfg)
    report = train_step(state, x, y)
    assert report["recon"] > 0
    assert report["commit"] == report["codebook"] == report["map"] == report["cls"] == 0.0


@pytest.mark.parametrize("term", ["recon", "commit", "codebook", "map"])
def test_zero_weight_removes_gradient(tiny_dataset, term):
    cfg = tiny_config(margin=5.0)
    x, y = tiny_batch(tiny_dataset, cfg)
    x = x.double()

    def grads(config, pick=None):
        state = TrainState(config, dtype=torch.float64)
        # seed class codes from data so some cells pick them
        with torch.no_grad():
            refresh_dead_codes(state, encode(x, state.autoencoder), y)
        total, terms, _ = generator_losses(state, x, y)
        obj = total if pick is None else sum(getattr(config, "w_" + k) * terms[k] for k in pick)
        return torch.autograd.grad(obj, list(state.autoencoder.parameters()), allow_unused=True)

    gated = grads(replace(cfg, **{"w_" + term: 0.0}))
    others = [k for k in ("recon", "commit", "codebook", "map") if k != term]
    reference = grads(cfg, pick=others)
    full = grads(cfg)
    diff = sum(float((g - r).norm()) for g, r in zip(gated, reference) if g is not None)
    assert diff < 1e-12
    # the term itself carried gradient, so gating was observable
    assert sum(float((f - g).norm()) for f, g in zip(full, gated) if f is not None) > 0


def test_nonfinite_names_term(tiny_dataset):
    cfg = tiny_config()
    state = TrainState(cfg)
    x, y = tiny_batch(tiny_dataset, cfg)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="recon"):
        train_step(state, x, y)


def test_identical_seed_identical_trajectory(tiny_dataset):
    cfg = tiny_config()
    runs = []
    for _ in range(2):
        state = TrainState(cfg)
        runs.append([train_step(state, *tiny_batch(tiny_dataset, cfg, s)) for s in range(3)])
    assert runs[0] == runs[1]


def test_checkpoint_roundtrip_next_step(tiny_dataset, tmp_path):
    cfg = tiny_config()
    state = TrainState(cfg)
    for s in range(3):
        train_step(state, *tiny_batch(tiny_dataset, cfg, s))
    save_checkpoint(state, tmp_path / "c.pt")
    loaded = load_checkpoint(tmp_path / "c.pt")
    batch = tiny_batch(tiny_dataset, cfg, 3)
    assert train_step(loaded, *batch) == train_step(state, *batch)
    assert tensors_equal(loaded.state_dict(), state.state_dict())


def test_bad_checkpoint_format():
    sd = TrainState(tiny_config()).state_dict()
    sd["format"] = "other/0"
    with pytest.raises(ValueError):
        TrainState.from_state_dict(sd)


def test_single_step_single_checkpoint(tiny_dataset, tmp_path):
    train(tiny_config(steps=1, checkpoint_interval=1), tiny_dataset, tmp_path)
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_000001.pt"]
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 2


def test_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    cfg = tiny_config(steps=6)
    full, _ = train(cfg, tiny_dataset, tmp_path / "full")
    train(replace(cfg, steps=4), tiny_dataset, tmp_path / "part")
    resumed, _ = train(cfg, tiny_dataset, tmp_path / "part", resume=tmp_path / "part/checkpoints/step_000004.pt")
    assert resumed.history == full.history
    assert tensors_equal(resumed.state_dict(), full.state_dict())


def test_checkpoints_bit_identical(tiny_dataset, tmp_path):
    for name in ("a", "b"):
        train(tiny_config(steps=4), tiny_dataset, tmp_path / name)
    for step in (2, 4):
        rel = f"checkpoints/step_{step:06d}.pt"
        assert hashlib.sha256((tmp_path / "a" / rel).read_bytes()).digest() == \
            hashlib.sha256((tmp_path / "b" / rel).read_bytes()).digest()


def test_empty_training_split(tiny_dataset, tmp_path):
    m = read_manifest(tiny_dataset)
    recs = [ManifestRecord(r.path, r.label, r.mask_path, "test") for r in m.records]
    write_manifest(DatasetManifest(recs, m.root), m.root / "no_train.tsv")
    with pytest.raises(ValueError, match="empty"):
        train(tiny_config(steps=1), m.root / "no_train.tsv", tmp_path)


def test_train_val_disjoint(tiny_dataset):
    m = read_manifest(tiny_dataset)
    assert not {r.path for r in m.split("train")} & {r.path for r in m.split("val")}


@pytest.mark.slow
def test_reconstruction_improves(tiny_dataset, tmp_path):
    cfg = tiny_config(steps=200, eval_interval=200, checkpoint_interval=200, dim=16, hidden=16, res_hidden=8)
    state, _ = train(cfg, tiny_dataset, tmp_path)
    assert state.history[-1]["recon"] < state.history[0]["recon"]
