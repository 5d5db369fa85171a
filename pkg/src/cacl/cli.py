"""Command-line entry point: ``cacl synth|train|segment|evaluate|plots``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("cacl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _data_root() -> Path:
    return Path(os.environ.get("CACL_DATA_DIR", "."))


def _default_manifest() -> Path:
    return _data_root() / "manifest.tsv"


def _fractions(text: str):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three fractions train,val,test")
    return parts


def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> Parser:
    p = Parser(prog="cacl", description="Class-aware codebook learning for weakly supervised segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="write a synthetic diffuse-stain dataset")
    s.add_argument("--out", type=Path, default=None, help="output directory (default: $CACL_DATA_DIR or .)")
    s.add_argument("--n-pos", type=int, default=300, help="number of stained (positive) patches")
    s.add_argument("--n-neg", type=int, default=300, help="number of unstained (negative) patches")
    s.add_argument("--size", type=int, default=64, help="patch side length in pixels")
    s.add_argument("--fractions", type=_fractions, default=(4 / 6, 1 / 6, 1 / 6),
                   help="train,val,test fractions (default 4/6,1/6,1/6)")
    s.add_argument("--seed", type=int, default=0, help="random seed")

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config", type=Path, default=None, help="key = value config file")
    t.add_argument("--manifest", type=Path, default=None, help="dataset manifest (default: $CACL_DATA_DIR/manifest.tsv)")
    t.add_argument("--out", type=Path, default=Path("run"), help="output directory for checkpoints and log")
    t.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    t.add_argument("--steps", type=int, default=None, help="total training steps (overrides config)")
    t.add_argument("--batch-size", type=int, default=None, help="batch size (overrides config)")
    t.add_argument("--checkpoint-interval", type=int, default=None, help="steps between checkpoints")
    t.add_argument("--eval-interval", type=int, default=None, help="steps between validation evaluations")
    t.add_argument("--set", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    g = sub.add_parser("segment", help="write segmentation masks for images")
    g.add_argument("images", nargs="*", type=Path, help="image files (PNG)")
    g.add_argument("--manifest", type=Path, default=None, help="segment a manifest split instead of files")
    g.add_argument("--split", choices=("train", "val", "test"), default="test", help="manifest split")
    g.add_argument("--method", choices=("cacl", "colordeconv"), default="cacl", help="segmentation method")
    g.add_argument("--checkpoint", type=Path, default=None, help="trained checkpoint (method cacl)")
    g.add_argument("--threshold", type=float, default=None, help="DAB threshold (method colordeconv)")
    g.add_argument("--stain-matrix", choices=("hdab", "he"), default="hdab", help="stain vectors for colordeconv")
    g.add_argument("--dilate", type=int, default=0, help="dilation radius in pixels")
    g.add_argument("--overlay", action="store_true", help="also write mask overlays")
    g.add_argument("--out", type=Path, default=Path("masks"), help="output directory")
    g.add_argument("--seed", type=int, default=0, help="random seed")

    e = sub.add_parser("evaluate", help="score a method on a manifest split")
    e.add_argument("--manifest", type=Path, default=None, help="dataset manifest (default: $CACL_DATA_DIR/manifest.tsv)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test", help="manifest split")
    e.add_argument("--method", choices=("cacl", "colordeconv"), default="cacl", help="segmentation method")
    e.add_argument("--checkpoint", type=Path, default=None, help="trained checkpoint (method cacl)")
    e.add_argument("--dilate", type=int, default=0, help="dilation radius; cacl with radius > 0 reports as cacl+morph")
    e.add_argument("--threshold", type=float, default=None,
                   help="colordeconv threshold; omitted means sweep and report the best")
    e.add_argument("--sweep-points", type=int, default=101, help="thresholds tried when sweeping")
    e.add_argument("--stain-matrix", choices=("hdab", "he"), default="hdab", help="stain vectors for colordeconv")
    e.add_argument("--soft-bce", action="store_true", help="colordeconv BCE from sigmoid probabilities")
    e.add_argument("--out", type=Path, default=Path("reports"), help="output directory")
    e.add_argument("--seed", type=int, default=0, help="random seed")

    pl = sub.add_parser("plots", help="bar charts of report metrics")
    pl.add_argument("reports", nargs="+", type=Path, help="JSON reports written by evaluate")
    pl.add_argument("--out", type=Path, default=Path("plots"), help="output directory")
    pl.add_argument("--seed", type=int, default=0, help="random seed")
    return p


def _cmd_synth(args) -> int:
    from .data import SyntheticConfig, generate_synthetic

    out = args.out or _data_root()
    try:
        cfg = SyntheticConfig(size=args.size, n_pos=args.n_pos, n_neg=args.n_neg, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    if abs(sum(args.fractions) - 1.0) > 1e-9 or min(args.fractions) < 0:
        raise UsageError("--fractions must be nonnegative and sum to 1")
    manifest = generate_synthetic(cfg, out, args.fractions)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} patches to {out} ({counts})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .data import atomic_write_bytes
    from .training import config_types, format_config, load_config, parse_config_text, train

    overrides = {"seed": args.seed, "steps": args.steps, "batch_size": args.batch_size,
                 "checkpoint_interval": args.checkpoint_interval, "eval_interval": args.eval_interval}
    if args.set:
        types = config_types()
        unknown = [k for k, _ in args.set if k not in types]
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        overrides.update(parse_config_text("\n".join(f"{k} = {v}" for k, v in args.set)))
    try:
        cfg = load_config(args.config, **overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}")
    manifest = args.manifest or _default_manifest()
    state, rows = train(cfg, manifest, args.out, resume=args.resume, progress=args.verbose)
    atomic_write_bytes(args.out / "config.txt", format_config(state.config).encode())
    final = rows[-1] if rows else {}
    print(f"trained {state.step} steps; final val dice {final.get('val_dice', float('nan')):.4f}")
    return EXIT_OK


def _load_images(args):
    from .data import load_image, read_manifest

    if args.manifest is not None:
        manifest = read_manifest(args.manifest)
        recs = manifest.split(args.split)
        return [(Path(r.path).stem, load_image(manifest.resolve(r.path))) for r in recs]
    if not args.images:
        raise UsageError("give image files or --manifest")
    return [(p.stem, load_image(p)) for p in args.images]


def _predictor(args):
    from .baselines import STAIN_MATRICES, colordeconv_predictor
    from .segmentation import cacl_predictor
    from .training import load_checkpoint

    if args.method == "cacl":
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required for method cacl")
        return cacl_predictor(load_checkpoint(args.checkpoint), args.dilate)
    if args.threshold is None:
        raise UsageError("--threshold is required for method colordeconv")
    base = colordeconv_predictor(args.threshold, STAIN_MATRICES[args.stain_matrix],
                                 soft=getattr(args, "soft_bce", False))
    if args.dilate:
        from .segmentation import SegmentationMask, dilate

        def predict(image):
            mask = dilate(SegmentationMask(base(image)[0], "baseline"), args.dilate).pixels
            return mask, mask.astype(np.float64)
        return predict
    return base


def _cmd_segment(args) -> int:
    from .data import save_png
    from .segmentation import SegmentationMask, overlay

    if args.dilate < 0:
        raise UsageError("--dilate must be nonnegative")
    predict = _predictor(args)
    items = _load_images(args)
    for name, img in items:
        mask, _ = predict(img)
        save_png(mask.astype(bool), args.out / f"{name}_mask.png")
        if args.overlay:
            save_png(overlay(img, SegmentationMask(mask)), args.out / f"{name}_overlay.png")
    print(f"wrote {len(items)} masks to {args.out}")
    return EXIT_OK


def method_tag(method: str, dilate: int) -> str:
    return f"{method}+morph" if dilate > 0 else method


def _cmd_evaluate(args) -> int:
    from .baselines import STAIN_MATRICES, colordeconv_predictor, dab_concentration, threshold_grid
    from .data import atomic_write_bytes, load_image, read_manifest
    from .metrics import evaluate, sweep

    if args.dilate < 0:
        raise UsageError("--dilate must be nonnegative")
    manifest = read_manifest(args.manifest or _default_manifest(), check_paths=False)
    tag = method_tag(args.method, args.dilate)
    config = {"split": args.split, "dilate": args.dilate, "manifest": str(args.manifest)}
    curve = None
    if args.method == "colordeconv" and args.threshold is None:
        stains = STAIN_MATRICES[args.stain_matrix]
        concs = [dab_concentration(load_image(manifest.resolve(r.path)), stains)
                 for r in manifest.split(args.split)]
        grid = threshold_grid(concs, args.sweep_points)
        config["stain_matrix"] = args.stain_matrix

        def make(t):
            args.threshold = t
            return _predictor(args)
        report, curve = sweep(make, grid, manifest, args.split, tag, config)
        args.threshold = None
    else:
        if args.method == "cacl":
            config["checkpoint"] = str(args.checkpoint)
        else:
            config.update(threshold=args.threshold, stain_matrix=args.stain_matrix)
        report = evaluate(_predictor(args), manifest, args.split, tag, config)
    stem = tag.replace("+", "_")
    atomic_write_bytes(args.out / f"{stem}.tsv", report.to_text().encode())
    atomic_write_bytes(args.out / f"{stem}.json", report.to_json().encode())
    if curve is not None:
        atomic_write_bytes(args.out / f"{stem}_sweep.tsv",
                           ("threshold\tdice\n" + "".join(f"{t:.6g}\t{d:.6f}\n" for t, d in curve)).encode())
    agg = report.aggregate
    print(f"{tag}: dice {agg['dice']:.4f} recall {agg['recall']:.4f} precision {agg['precision']:.4f} "
          f"bce {agg['bce']:.4f} (n={len(report.records)}, errors={len(report.errors)})")
    return EXIT_OK


def _cmd_plots(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import MetricsReport

    reports = [MetricsReport.from_json(p.read_text(encoding="utf-8")) for p in args.reports]
    names = [r.method for r in reports]
    args.out.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.5))
    for ax, key in zip(axes, ("dice", "recall", "precision", "bce")):
        vals = [r.aggregate[key] for r in reports]
        ax.bar(range(len(vals)), vals, color="tab:blue")
        ax.set_xticks(range(len(vals)), names, rotation=30, ha="right")
        ax.set_title(key)
        if key != "bce":
            ax.set_ylim(0, 1)
    fig.tight_layout()
    path = args.out / "metrics.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "segment": _cmd_segment,
            "evaluate": _cmd_evaluate, "plots": _cmd_plots}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    np.random.seed(getattr(args, "seed", None) or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cacl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"cacl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
