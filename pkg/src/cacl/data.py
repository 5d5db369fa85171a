"""Synthetic diffuse-stain patches, tiling, manifests and splits."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .autoencoder import Label

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("path", "label", "mask_path", "split")


@dataclass
class SyntheticConfig:
    size: int = 64
    n_pos: int = 300
    n_neg: int = 300
    seed: int = 0
    # background
    tissue_rgb: tuple = (0.90, 0.62, 0.78)
    nucleus_rgb: tuple = (0.38, 0.27, 0.58)
    noise_scale: float = 0.12
    blob_density: float = 1 / 160
    pixel_noise: float = 0.02
    # stain band
    stain_rgb: tuple = (0.48, 0.28, 0.12)
    band_thickness: tuple = (7.0, 16.0)
    falloff: float = 2.0
    edge_roughness: float = 0.35
    stain_strength: tuple = (0.75, 0.95)

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("n_pos and n_neg must both be >= 1")
        if self.size < 8:
            raise ValueError("size must be at least 8")
        for name in ("tissue_rgb", "nucleus_rgb", "stain_rgb"):
            rgb = np.asarray(getattr(self, name), dtype=float)
            if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 1:
                raise ValueError(f"{name} must be three values in [0, 1]")


@dataclass
class ManifestRecord:
    path: str
    label: Label
    mask_path: str = ""
    split: str = "train"

    def __post_init__(self):
        self.label = Label(self.label)
        if self.split not in SPLITS:
            raise ValueError(f"invalid split {self.split!r}")


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return (n - n.mean()) / (n.std() + 1e-12)


def _background(rng, cfg: SyntheticConfig) -> np.ndarray:
    s = cfg.size
    density = 1.0 / (1.0 + np.exp(-1.5 * _smooth_noise(rng, (s, s), cfg.noise_scale * s) - 1.0))
    tissue = np.asarray(cfg.tissue_rgb)
    img = 1.0 - density[..., None] * (1.0 - tissue)
    img *= 1.0 + 0.05 * _smooth_noise(rng, (s, s), 1.5)[..., None]

    yy, xx = np.mgrid[0:s, 0:s]
    nuc = np.zeros((s, s))
    for _ in range(rng.poisson(cfg.blob_density * s * s)):
        cy, cx = rng.uniform(0, s, 2)
        ry, rx = rng.uniform(1.5, 3.5, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        nuc = np.maximum(nuc, np.clip(1.5 - np.hypot(u, v) * 1.5, 0, 1) * density)
    img = img * (1 - nuc[..., None]) + nuc[..., None] * np.asarray(cfg.nucleus_rgb)
    return img


def _stain_alpha(rng, cfg: SyntheticConfig) -> np.ndarray:
    """Soft band along one randomly chosen image edge."""
    s = cfg.size
    along = _smooth_noise(rng, (s,), s / 8)
    thickness = rng.uniform(*cfg.band_thickness) * (1.0 + cfg.edge_roughness * along)
    depth = np.arange(s, dtype=float)[:, None]  # distance from the top edge
    alpha = 1.0 / (1.0 + np.exp((depth - thickness[None, :]) / cfg.falloff))
    texture = 0.8 + 0.2 * np.clip(_smooth_noise(rng, (s, s), 2.0), -2, 2) / 2
    alpha = alpha * texture * rng.uniform(*cfg.stain_strength)
    # the band was built against the top edge; rotate it onto a random edge
    return np.rot90(alpha, k=int(rng.integers(4))).copy()


def synthesize_patch(rng, cfg: SyntheticConfig, positive: bool) -> tuple[np.ndarray, np.ndarray]:
    """One ``size x size x 3`` image in ``[0, 1]`` and its boolean stain mask."""
    img = _background(rng, cfg)
    if positive:
        alpha = _stain_alpha(rng, cfg)
        img = img * (1 - alpha[..., None]) + alpha[..., None] * np.asarray(cfg.stain_rgb)
        mask = alpha > 0.5
    else:
        mask = np.zeros((cfg.size, cfg.size), dtype=bool)
    img = img + rng.normal(0, cfg.pixel_noise, img.shape)
    return np.clip(img, 0, 1), mask


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_png(array: np.ndarray, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    elif array.dtype != np.uint8:
        array = to_uint8(array)
    try:
        Image.fromarray(array).save(path)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def generate_synthetic(cfg: SyntheticConfig, out_dir,
                       fractions=(4 / 6, 1 / 6, 1 / 6)) -> DatasetManifest:
    """Write images, masks and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for positive, n in ((True, cfg.n_pos), (False, cfg.n_neg)):
        tag = "pos" if positive else "neg"
        for i in range(n):
            img, mask = synthesize_patch(rng, cfg, positive)
            name = f"{tag}_{i:05d}.png"
            save_png(img, out_dir / "images" / name)
            save_png(mask, out_dir / "masks" / name)
            records.append(ManifestRecord(f"images/{name}",
                                          Label.POSITIVE if positive else Label.NEGATIVE,
                                          f"masks/{name}"))
    manifest = split_manifest(DatasetManifest(records, out_dir), fractions, cfg.seed)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def tile_image(image: np.ndarray, patch: int, stride: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Row-major sliding windows; trailing partial windows are dropped."""
    h, w = image.shape[:2]
    if patch > min(h, w) or patch < 1:
        raise ValueError(f"patch size {patch} does not fit a {h}x{w} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    tiles = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            tiles.append((image[y:y + patch, x:x + patch].copy(), (y, x)))
    return tiles


def split_manifest(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Stratified, seeded assignment of every record to train/val/test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    out = []
    for label in (Label.POSITIVE, Label.NEGATIVE):
        group = [r for r in manifest.records if r.label is label]
        order = rng.permutation(len(group))
        n_train = int(round(fractions[0] * len(group)))
        n_val = min(int(round(fractions[1] * len(group))), len(group) - n_train)
        for rank, j in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out.append((group[j], split))
    # keep original record order
    pos = {id(r): i for i, r in enumerate(manifest.records)}
    out.sort(key=lambda t: pos[id(t[0])])
    return DatasetManifest([replace(r, split=s) for r, s in out], manifest.root)


def atomic_write_bytes(path, data: bytes):
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(manifest: DatasetManifest, path):
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow([r.path, r.label.value, r.mask_path, r.split])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: expected header {MANIFEST_COLUMNS}, got {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            rec = ManifestRecord(*row)
            if check_paths:
                for rel in (rec.path, rec.mask_path):
                    if rel and not (root / rel).exists():
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {root / rel}")
            records.append(rec)
    return DatasetManifest(records, root)


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray, list[ManifestRecord]]:
    """Stack a split into ``N x H x W x 3`` images and an ``N`` bool label vector."""
    recs = manifest.split(split)
    if not recs:
        return np.zeros((0, 0, 0, 3)), np.zeros(0, dtype=bool), recs
    images = np.stack([load_image(manifest.resolve(r.path)) for r in recs])
    labels = np.array([r.label.is_positive for r in recs])
    return images, labels, recs
