import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cacl.autoencoder import Label
from cacl.data import DatasetManifest, ManifestRecord, save_png
from cacl.metrics import MetricsReport, bce, dice, evaluate, precision_recall, score


def counts(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += bool(p and g)
        fp += bool(p and not g)
        fn += bool(g and not p)
    return tp, fp, fn


def oracle(pred, gt):
    """Dice, precision, recall from pixel counts, with the empty-gt convention."""
    if not np.any(gt):
        v = 0.0 if np.any(pred) else 1.0
        return v, v, v
    tp, fp, fn = counts(pred, gt)
    d = 2 * tp / (2 * tp + fp + fn)
    p = tp / (tp + fp) if tp + fp else 0.0
    return d, p, tp / (tp + fn)


def test_identity():
    m = np.zeros((5, 5), bool)
    m[1:3, 2:4] = True
    assert dice(m, m) == 1.0


def test_empty_gt_and_pred():
    z = np.zeros((4, 4), bool)
    assert dice(z, z) == 1.0
    assert precision_recall(z, z) == (1.0, 1.0)


def test_empty_gt_nonempty_pred():
    z = np.zeros((4, 4), bool)
    p = z.copy()
    p[0, 0] = True
    assert dice(p, z) == 0.0
    assert precision_recall(p, z) == (0.0, 0.0)


def test_strict_subset():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    pred = np.zeros_like(gt)
    pred[0] = True
    p, r = precision_recall(pred, gt)
    assert p == 1.0 and r < 1.0


def test_empty_pred_nonempty_gt():
    gt = np.ones((2, 2), bool)
    assert precision_recall(np.zeros_like(gt), gt) == (0.0, 0.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        bce(np.zeros((2, 2)), np.zeros((3, 2)))


def test_random_8x8_against_counts(rng):
    for _ in range(50):
        pred = rng.random((8, 8)) < 0.4
        gt = rng.random((8, 8)) < 0.4
        d, p, r = oracle(pred, gt)
        assert dice(pred, gt) == d
        assert precision_recall(pred, gt) == (p, r)


def test_bce_cases(rng):
    gt = rng.random((4, 4)) < 0.5
    assert bce(gt.astype(float), gt) < 2e-7
    assert bce(np.full((4, 4), 0.5), gt) == pytest.approx(math.log(2), abs=1e-15)
    prob = rng.random((4, 4))
    direct = 0.0
    for p, g in zip(prob.ravel(), gt.ravel()):
        direct += -math.log(p) if g else -math.log(1 - p)
    assert bce(prob, gt) == pytest.approx(direct / 16, abs=1e-12)


def test_all_3x3_pairs():
    masks = [np.array(bits, dtype=bool).reshape(3, 3) for bits in itertools.product((0, 1), repeat=9)]
    for gt in masks:
        g_any = gt.any()
        for pred in masks:
            d, p, r = oracle(pred, gt)
            assert dice(pred, gt) == d
            assert precision_recall(pred, gt) == (p, r)
        # every pixel wrong: each term hits the clamp
        assert bce(np.logical_not(gt), gt) == pytest.approx(-math.log(1e-7), rel=1e-9)
        assert g_any or dice(np.zeros_like(gt), gt) == 1.0


@settings(max_examples=200, deadline=None)
@given(arrays(bool, (5, 5)), arrays(bool, (5, 5)))
def test_symmetry_and_harmonic_mean(pred, gt):
    tp, _, _ = counts(pred, gt)
    if pred.any() and gt.any():
        assert dice(pred, gt) == pytest.approx(dice(gt, pred))
    if tp > 0:
        p, r = precision_recall(pred, gt)
        assert dice(pred, gt) == pytest.approx(2 * p * r / (p + r))
    for v in (dice(pred, gt), *precision_recall(pred, gt)):
        assert 0.0 <= v <= 1.0


def test_report_aggregate_and_serialization():
    rep = MetricsReport("cacl", [score("a", np.ones((2, 2)), np.ones((2, 2)), label="positive"),
                                 score("b", np.ones((2, 2)), np.zeros((2, 2)), label="negative")])
    assert rep.aggregate["dice"] == 0.5
    back = MetricsReport.from_json(rep.to_json())
    assert back.records == rep.records and back.method == "cacl"
    assert rep.to_text().strip().splitlines()[-1].startswith("# method=cacl n=2")


def test_evaluate_singleton_and_missing_mask(tmp_path):
    img = np.full((8, 8, 3), 0.5)
    gt = np.zeros((8, 8), bool)
    gt[:3] = True
    save_png(img, tmp_path / "a.png")
    save_png(gt, tmp_path / "a_mask.png")
    save_png(img, tmp_path / "b.png")
    manifest = DatasetManifest([ManifestRecord("a.png", Label.POSITIVE, "a_mask.png", "test"),
                                ManifestRecord("b.png", Label.NEGATIVE, "", "test")], tmp_path)
    rep = evaluate(lambda im: (gt, gt.astype(float)), manifest, "test", "perfect")
    assert len(rep.records) == 1 and rep.aggregate["dice"] == 1.0
    assert len(rep.errors) == 1 and rep.errors[0]["id"] == "b.png"
    again = evaluate(lambda im: (gt, gt.astype(float)), manifest, "test", "perfect")
    assert again.to_json() == rep.to_json()
