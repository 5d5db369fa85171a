"""Overlap metrics with the empty-ground-truth convention, plus report aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

BCE_CLAMP = 1e-7


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> tuple[int, int, int]:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def _degenerate(pred, gt) -> float | None:
    """1 or 0 when the ground truth is empty, ``None`` otherwise."""
    if gt.any():
        return None
    return 0.0 if pred.any() else 1.0


def dice(pred, gt) -> float:
    """Dice coefficient; an empty ground truth scores 1 only for an empty prediction."""
    pred, gt = _pair(pred, gt)
    special = _degenerate(pred, gt)
    if special is not None:
        return special
    tp, fp, fn = confusion(pred, gt)
    return 2.0 * tp / (2 * tp + fp + fn)


def precision_recall(pred, gt) -> tuple[float, float]:
    pred, gt = _pair(pred, gt)
    special = _degenerate(pred, gt)
    if special is not None:
        return special, special
    tp, fp, fn = confusion(pred, gt)
    precision = tp / (tp + fp) if tp + fp else 0.0
    return precision, tp / (tp + fn)


def bce(pred_prob, gt) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.asarray(pred_prob, dtype=np.float64)
    g = np.asarray(gt).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    p = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    return float(np.mean(-(g * np.log(p) + (1 - g) * np.log(1 - p))))


@dataclass
class ImageMetrics:
    ident: str
    dice: float
    precision: float
    recall: float
    bce: float
    label: str = ""


def score(ident: str, pred, gt, prob=None, label: str = "") -> ImageMetrics:
    p, r = precision_recall(pred, gt)
    return ImageMetrics(ident, dice(pred, gt), p, r,
                        bce(pred if prob is None else prob, gt), label)


@dataclass
class MetricsReport:
    method: str
    records: list[ImageMetrics] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        if not self.records:
            return {k: math.nan for k in ("dice", "precision", "recall", "bce")}
        return {k: float(np.mean([getattr(r, k) for r in self.records]))
                for k in ("dice", "precision", "recall", "bce")}

    def subset(self, label: str) -> "MetricsReport":
        return MetricsReport(self.method, [r for r in self.records if r.label == label], [], self.config)

    def to_text(self) -> str:
        lines = ["id\tlabel\tdice\tprecision\trecall\tbce"]
        for r in self.records:
            lines.append(f"{r.ident}\t{r.label}\t{r.dice:.6f}\t{r.precision:.6f}\t{r.recall:.6f}\t{r.bce:.6f}")
        agg = self.aggregate
        lines.append(f"# method={self.method} n={len(self.records)} errors={len(self.errors)} "
                     + " ".join(f"{k}={v:.6f}" for k, v in agg.items()))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "aggregate": self.aggregate,
            "records": [asdict(r) for r in self.records],
            "errors": self.errors,
            "config": self.config,
        }, indent=2, sort_keys=True, default=str)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        return cls(obj["method"], [ImageMetrics(**r) for r in obj["records"]],
                   obj.get("errors", []), obj.get("config", {}))


def evaluate(predict, manifest, split: str = "test", method: str = "cacl", config: dict | None = None,
             images=None) -> MetricsReport:
    """Score ``predict`` on one manifest split.

    ``predict`` maps an ``H x W x 3`` image to ``(mask, probability)``.
    Records without a readable ground-truth mask become error entries and are
    left out of the aggregates. ``images`` may carry preloaded pixels keyed by
    record path.
    """
    from .data import load_image, load_mask

    report = MetricsReport(method, config=dict(config or {}))
    for rec in manifest.split(split):
        if not rec.mask_path:
            report.errors.append({"id": rec.path, "error": "missing ground-truth mask"})
            continue
        try:
            gt = load_mask(manifest.resolve(rec.mask_path))
        except OSError as exc:
            report.errors.append({"id": rec.path, "error": str(exc)})
            continue
        img = images[rec.path] if images is not None else load_image(manifest.resolve(rec.path))
        mask, prob = predict(img)
        report.records.append(score(rec.path, mask, gt, prob, rec.label.value))
    return report


def sweep(make_predict, thresholds, manifest, split: str = "test", method: str = "colordeconv",
          config: dict | None = None) -> tuple[MetricsReport, list[tuple[float, float]]]:
    """Evaluate ``make_predict(t)`` for each threshold; return the best-Dice report and the curve."""
    from .data import load_image

    images = {r.path: load_image(manifest.resolve(r.path)) for r in manifest.split(split)}
    best, curve = None, []
    for t in thresholds:
        rep = evaluate(make_predict(float(t)), manifest, split, method,
                       {**(config or {}), "threshold": float(t)}, images=images)
        d = rep.aggregate["dice"]
        curve.append((float(t), d))
        if best is None or d > best.aggregate["dice"]:
            best = rep
    return best, curve
