"""Alternating generator/classifier optimization, checkpoints and the training loop."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import codebook as vq
from .adversarial import ImagePool, ResidualClassifier, classifier_loss, mapping_loss
from .autoencoder import (Autoencoder, codebook_divergence_loss, encode, forward_dual,
                          reconstruction_loss)
from .codebook import PartitionedCodebook, QuantizationResult
from .data import atomic_write_bytes, load_mask, load_split, read_manifest
from .metrics import dice
from .segmentation import segment_images

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cacl-checkpoint/1"
LOSS_TERMS = ("recon", "commit", "codebook", "map", "cls")


@dataclass
class TrainConfig:
    w_commit: float = 1.0
    w_recon: float = 1.0
    w_codebook: float = 1.0
    w_map: float = 0.01
    w_cls: float = 1.0
    beta: float = 0.25
    margin: float = 1.0
    signed_codebook: bool = False
    lr_gen: float = 2e-4
    lr_cls: float = 2e-4
    batch_size: int = 16
    steps: int = 1500
    seed: int = 0
    checkpoint_interval: int = 500
    eval_interval: int = 250
    num_shared: int = 32
    num_class: int = 32
    dim: int = 64
    hidden: int = 64
    res_hidden: int = 32
    decay: float = 0.99
    pool_capacity: int = 50
    dead_threshold: int = 0
    dead_check_interval: int = 100
    flips: bool = True
    classifier: str = "small"

    def __post_init__(self):
        for name in ("w_commit", "w_recon", "w_codebook", "w_map", "w_cls", "beta", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if self.classifier not in ("small", "resnet18"):
            raise ValueError(f"unknown classifier {self.classifier!r}")


def _parse_value(raw: str, kind):
    if kind in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


def config_types() -> dict:
    return {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = config_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _parse_value(value, types[key])
    return out


def load_config(path, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


class TrainState:
    """Everything mutable during training."""

    def __init__(self, config: TrainConfig, dtype: torch.dtype = torch.float32):
        self.config = config
        torch.manual_seed(config.seed)
        self.autoencoder = Autoencoder(config.dim, config.hidden, config.res_hidden).to(dtype)
        self.codebook = vq.init_codebook(config.num_shared, config.num_class, config.dim,
                                         config.seed, decay=config.decay, dtype=dtype)
        cls = ResidualClassifier.resnet18() if config.classifier == "resnet18" else ResidualClassifier()
        self.classifier = cls.to(dtype)
        self.opt_gen = torch.optim.Adam(self.autoencoder.parameters(), lr=config.lr_gen, betas=(0.5, 0.999))
        self.opt_cls = torch.optim.Adam(self.classifier.parameters(), lr=config.lr_cls, betas=(0.5, 0.999))
        self.pool_pos = ImagePool(config.pool_capacity, seed=config.seed * 2 + 1)
        self.pool_neg = ImagePool(config.pool_capacity, seed=config.seed * 2 + 2)
        self.usage = torch.zeros(self.codebook.num_codes, dtype=torch.long)
        self.step = 0
        self.history: list[dict] = []

    @property
    def dtype(self):
        return self.codebook.codes.dtype

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "step": self.step,
            "autoencoder": self.autoencoder.state_dict(),
            "codebook": self.codebook.state_dict(),
            "classifier": self.classifier.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_cls": self.opt_cls.state_dict(),
            "pool_pos": self.pool_pos.state_dict(),
            "pool_neg": self.pool_neg.state_dict(),
            "usage": self.usage.clone(),
            "history": list(self.history),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "TrainState":
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {state.get('format')!r}")
        dtype = state["codebook"]["codes"].dtype
        obj = cls(TrainConfig(**state["config"]), dtype=dtype)
        obj.autoencoder.load_state_dict(state["autoencoder"])
        obj.codebook.load_state_dict(state["codebook"])
        obj.classifier.load_state_dict(state["classifier"])
        obj.opt_gen.load_state_dict(state["opt_gen"])
        obj.opt_cls.load_state_dict(state["opt_cls"])
        obj.pool_pos.load_state_dict(state["pool_pos"])
        obj.pool_neg.load_state_dict(state["pool_neg"])
        obj.usage = state["usage"].clone()
        obj.step = int(state["step"])
        obj.history = list(state["history"])
        return obj


def save_checkpoint(state: TrainState, path) -> Path:
    buf = io.BytesIO()
    torch.save(state.state_dict(), buf)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def load_checkpoint(path) -> TrainState:
    state = torch.load(path, map_location="cpu", weights_only=False)
    return TrainState.from_state_dict(state)


def select_path(e_pos: QuantizationResult, e_neg: QuantizationResult, positive: torch.Tensor) -> QuantizationResult:
    """Per patch, the quantization whose reconstruction is trained: S+C for positives, S for negatives."""
    sel = positive[:, None, None]
    return QuantizationResult(
        quantized=torch.where(sel[:, None], e_pos.quantized, e_neg.quantized),
        indices=torch.where(sel, e_pos.indices, e_neg.indices),
        from_class_partition=torch.where(sel, e_pos.from_class_partition, e_neg.from_class_partition),
        commitment_value=torch.zeros(()),
    )


def generator_losses(state: TrainState, images: torch.Tensor, positive: torch.Tensor,
                     features: torch.Tensor | None = None) -> tuple[torch.Tensor, dict, dict]:
    """Weighted generator objective, per-term values and the intermediates of the pass."""
    cfg = state.config
    if features is None:
        features = encode(images, state.autoencoder)
    pair, e_pos, e_neg = forward_dual(images, state.autoencoder, state.codebook, cfg.beta, features=features)
    selected = select_path(e_pos, e_neg, positive)
    zero = torch.zeros((), dtype=features.dtype)
    terms = {}
    terms["recon"] = reconstruction_loss(images, positive, pair) if cfg.w_recon else zero
    terms["commit"] = vq.commitment_loss(features, selected, cfg.beta) if cfg.w_commit else zero
    terms["codebook"] = (codebook_divergence_loss(e_neg, e_pos, positive, cfg.margin, cfg.signed_codebook)
                         if cfg.w_codebook else zero)
    terms["map"] = (mapping_loss(pair.recon_positive[positive], pair.recon_negative, state.classifier)
                    if cfg.w_map else zero)
    weights = {"recon": cfg.w_recon, "commit": cfg.w_commit, "codebook": cfg.w_codebook, "map": cfg.w_map}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss at step {state.step}: {float(value)}")
    total = sum(weights[k] * terms[k] for k in terms)
    extras = {"features": features, "pair": pair, "e_pos": e_pos, "e_neg": e_neg, "selected": selected}
    return total, terms, extras


@torch.no_grad()
def refresh_dead_codes(state: TrainState, features: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Re-seed unused codes from the current batch.

    Shared codes draw from negative-patch cells. Class codes draw from the
    positive-patch cells that the shared codes represent worst.
    """
    cfg = state.config
    book = state.codebook
    flat = features.detach().permute(0, 2, 3, 1)
    neg_cells = flat[~positive].reshape(-1, book.dim)
    pos_cells = flat[positive].reshape(-1, book.dim)
    if neg_cells.shape[0] == 0:
        neg_cells = flat.reshape(-1, book.dim)
    seed = int(np.random.default_rng([cfg.seed, state.step, 7]).integers(2**31))
    usage = state.usage.clone()
    # shared first, so class candidates are ranked against the refreshed shared codes
    shared_usage = usage.clone()
    shared_usage[book.num_shared:] = cfg.dead_threshold + 1
    replaced = [vq.dead_code_reinit(book, shared_usage, cfg.dead_threshold, seed, neg_cells)]
    class_candidates = pos_cells
    if pos_cells.shape[0]:
        d = ((pos_cells[:, None, :] - book.shared_codes[None].to(pos_cells.dtype)) ** 2).sum(-1).min(1).values
        keep = max(1, pos_cells.shape[0] // 4)
        class_candidates = pos_cells[torch.argsort(d, descending=True, stable=True)[:keep]]
        class_usage = usage.clone()
        class_usage[:book.num_shared] = cfg.dead_threshold + 1
        replaced.append(vq.dead_code_reinit(book, class_usage, cfg.dead_threshold, seed + 1,
                                            neg_cells, class_candidates=class_candidates))
    state.usage.zero_()
    return torch.cat(replaced)


def train_step(state: TrainState, images: torch.Tensor, positive: torch.Tensor) -> dict:
    """One generator update (with EMA codebook update) then one classifier update."""
    cfg = state.config
    images = images.to(state.dtype)
    positive = positive.to(torch.bool)

    if cfg.dead_check_interval and state.step % cfg.dead_check_interval == 0:
        with torch.no_grad():
            probe = encode(images, state.autoencoder)
        refresh_dead_codes(state, probe, positive)

    state.autoencoder.train()
    total, terms, extras = generator_losses(state, images, positive)
    state.opt_gen.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        state.opt_gen.step()

    # shared codes track negative patches, class codes track class cells of positives
    selected = extras["selected"]
    contributes = ~positive[:, None, None] | extras["e_pos"].from_class_partition
    vq.ema_update(state.codebook, extras["features"], selected, mask=contributes)
    state.usage += torch.bincount(selected.indices[contributes].flatten(),
                                  minlength=state.codebook.num_codes)

    pair = extras["pair"]
    if cfg.w_cls:
        fake_pos = state.pool_pos.query(pair.recon_positive[positive].detach())
        fake_neg = state.pool_neg.query(pair.recon_negative.detach())
        l_cls = classifier_loss(images[positive], images[~positive], fake_pos, fake_neg, state.classifier)
        if not torch.isfinite(l_cls):
            raise FloatingPointError(f"non-finite cls loss at step {state.step}: {float(l_cls)}")
        state.opt_cls.zero_grad(set_to_none=True)
        (cfg.w_cls * l_cls).backward()
        state.opt_cls.step()
        terms["cls"] = l_cls
    else:
        terms["cls"] = torch.zeros(())

    state.step += 1
    report = {k: float(v.detach()) for k, v in terms.items()}
    report["class_cells"] = float(extras["e_pos"].from_class_partition.float().mean())
    state.history.append(report)
    return report


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic epoch-shuffled batch for ``step``; depends only on its arguments."""
    per_epoch = max(1, n // batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


def make_batch(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, step: int):
    idx = batch_indices(len(images), cfg.batch_size, cfg.seed, step)
    x = images[idx]
    if cfg.flips:
        rng = np.random.default_rng([cfg.seed, step, 1])
        flip_h = rng.random(len(idx)) < 0.5
        flip_v = rng.random(len(idx)) < 0.5
        x = x.copy()
        x[flip_h] = x[flip_h, :, ::-1]
        x[flip_v] = x[flip_v, ::-1]
    t = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
    return t, torch.from_numpy(labels[idx])


def validation_dice(state: TrainState, images: np.ndarray, masks: list[np.ndarray]) -> float:
    if len(images) == 0:
        return math.nan
    preds = segment_images(images, state.autoencoder, state.codebook)
    return float(np.mean([dice(p.pixels, g) for p, g in zip(preds, masks)]))


LOG_HEADER = "step\t" + "\t".join(LOSS_TERMS) + "\tval_dice"


def train(config: TrainConfig, manifest_path, out_dir, resume=None, progress: bool = False):
    """Run ``config.steps`` training steps; returns the final state and the evaluation rows.

    Checkpoints land in ``out_dir/checkpoints/step_NNNNNN.pt`` every
    ``checkpoint_interval`` steps and at the end; evaluation rows are appended
    to ``out_dir/train_log.tsv``.
    """
    manifest = read_manifest(manifest_path)
    images, labels, _ = load_split(manifest, "train")
    if len(images) == 0:
        raise ValueError(f"{manifest_path}: training split is empty")
    val_images, _, val_recs = load_split(manifest, "val")
    val_masks = [load_mask(manifest.resolve(r.mask_path)) if r.mask_path else
                 np.zeros(val_images.shape[1:3], bool) for r in val_recs]
    images = images.astype(np.float32)
    val_images = val_images.astype(np.float32)

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    if resume is not None:
        state = load_checkpoint(resume) if not isinstance(resume, TrainState) else resume
        state.config = TrainConfig(**{**asdict(state.config), "steps": config.steps})
    else:
        state = TrainState(config)
    cfg = state.config
    rows = []
    log_path = out_dir / "train_log.tsv"
    out_dir.mkdir(parents=True, exist_ok=True)
    if state.step == 0 or not log_path.exists():
        log_path.write_text(LOG_HEADER + "\n", encoding="utf-8")

    last_saved = None
    while state.step < cfg.steps:
        x, y = make_batch(images, labels, cfg, state.step)
        report = train_step(state, x, y)
        step = state.step
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            vd = validation_dice(state, val_images, val_masks)
            row = {"step": step, **{k: report[k] for k in LOSS_TERMS}, "val_dice": vd}
            rows.append(row)
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write("\t".join([str(step)] + [f"{row[k]:.6g}" for k in LOSS_TERMS] + [f"{vd:.6g}"]) + "\n")
            if progress:
                log.info("step %d recon %.4f commit %.4f codebook %.4f map %.4f cls %.4f C-cells %.3f val_dice %.4f",
                         step, *(report[k] for k in LOSS_TERMS), report["class_cells"], vd)
        if step % cfg.checkpoint_interval == 0:
            last_saved = save_checkpoint(state, ckpt_dir / f"step_{step:06d}.pt")
    if last_saved is None or state.step % cfg.checkpoint_interval:
        save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.pt")
    return state, rows
