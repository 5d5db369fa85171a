import hashlib

import numpy as np
import pytest

from cacl.autoencoder import Label
from cacl.data import (DatasetManifest, ManifestRecord, SyntheticConfig, generate_synthetic, load_mask,
                       read_manifest, split_manifest, tile_image, write_manifest)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSynthetic:
    def test_counts_must_be_positive(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_pos=0)
        with pytest.raises(ValueError):
            SyntheticConfig(n_neg=0)

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(size=32, n_pos=3, n_neg=3, seed=5)
        a = generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        for rec in a.records:
            assert digest(tmp_path / "a" / rec.path) == digest(tmp_path / "b" / rec.path)
            assert digest(tmp_path / "a" / rec.mask_path) == digest(tmp_path / "b" / rec.mask_path)
        assert digest(tmp_path / "a" / "manifest.tsv") == digest(tmp_path / "b" / "manifest.tsv")

    def test_mask_construction(self, tiny_dataset):
        m = read_manifest(tiny_dataset)
        for rec in m.records:
            mask = load_mask(m.resolve(rec.mask_path))
            if rec.label is Label.POSITIVE:
                assert mask.sum() > 0
            else:
                assert mask.sum() == 0


class TestTiling:
    def test_exact(self):
        img = np.zeros((256, 256, 3))
        tiles = tile_image(img, 128, 128)
        assert [off for _, off in tiles] == [(0, 0), (0, 128), (128, 0), (128, 128)]

    def test_remainder_dropped(self):
        assert len(tile_image(np.zeros((300, 300, 3)), 128, 128)) == 4

    def test_overlapping_window_count(self):
        # (256 - 128) / 64 + 1 = 3 windows per axis
        assert len(tile_image(np.zeros((256, 256, 3)), 128, 64)) == 9

    def test_too_large(self):
        with pytest.raises(ValueError):
            tile_image(np.zeros((64, 100, 3)), 128, 32)

    def test_reassembly(self, rng):
        img = rng.random((100, 70, 3))
        tiles = tile_image(img, 16, 16)
        canvas = np.full_like(img, -1.0)
        for patch, (y, x) in tiles:
            canvas[y:y + 16, x:x + 16] = patch
        covered = canvas[:96, :64]
        np.testing.assert_array_equal(covered, img[:96, :64])


def records(n_pos, n_neg):
    return [ManifestRecord(f"p{i}.png", Label.POSITIVE, f"m/p{i}.png") for i in range(n_pos)] + \
           [ManifestRecord(f"n{i}.png", Label.NEGATIVE, f"m/n{i}.png") for i in range(n_neg)]


class TestSplit:
    def test_all_train(self):
        m = split_manifest(DatasetManifest(records(5, 7)), (1, 0, 0), seed=0)
        assert all(r.split == "train" for r in m.records)

    def test_fraction_sum(self):
        with pytest.raises(ValueError):
            split_manifest(DatasetManifest(records(2, 2)), (0.5, 0.3, 0.3))

    @pytest.mark.parametrize("seed", range(5))
    def test_partition_and_stratification(self, seed):
        rng = np.random.default_rng(seed)
        n_pos = int(rng.integers(10, 90))
        recs = records(n_pos, 100 - n_pos)
        m = split_manifest(DatasetManifest(recs), (0.6, 0.2, 0.2), seed=seed)
        sets = {s: {r.path for r in m.split(s)} for s in ("train", "val", "test")}
        assert not (sets["train"] & sets["val"] or sets["train"] & sets["test"] or sets["val"] & sets["test"])
        assert set().union(*sets.values()) == {r.path for r in recs}
        global_ratio = n_pos / 100
        for s in ("train", "val", "test"):
            part = m.split(s)
            pos = sum(r.label is Label.POSITIVE for r in part)
            assert abs(pos - global_ratio * len(part)) <= 1

    def test_deterministic(self):
        a = split_manifest(DatasetManifest(records(20, 20)), (0.5, 0.25, 0.25), seed=3)
        b = split_manifest(DatasetManifest(records(20, 20)), (0.5, 0.25, 0.25), seed=3)
        assert [r.split for r in a.records] == [r.split for r in b.records]


def test_manifest_roundtrip(tmp_path):
    m = split_manifest(DatasetManifest(records(4, 4)), (0.5, 0.25, 0.25), seed=1)
    write_manifest(m, tmp_path / "m.tsv")
    back = read_manifest(tmp_path / "m.tsv", check_paths=False)
    assert back.records == m.records
    assert (tmp_path / "m.tsv").read_text().splitlines()[0] == "path\tlabel\tmask_path\tsplit"


def test_manifest_missing_file(tmp_path):
    write_manifest(DatasetManifest(records(1, 0)), tmp_path / "m.tsv")
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "m.tsv")


def test_manifest_bad_label(tmp_path):
    (tmp_path / "m.tsv").write_text("path\tlabel\tmask_path\tsplit\na.png\tmaybe\t\ttrain\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.tsv", check_paths=False)
