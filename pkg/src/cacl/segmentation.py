"""Masks from class-codebook usage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from . import codebook as vq
from .autoencoder import encode


@dataclass
class SegmentationMask:
    pixels: np.ndarray
    source: str = "cacl"
    provenance: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels).astype(bool)

    @property
    def shape(self):
        return self.pixels.shape


def extract_mask(usage, target: tuple[int, int], source: str = "cacl", provenance: str = "") -> SegmentationMask:
    """Expand each feature cell to an ``f x f`` pixel block."""
    usage = np.asarray(usage, dtype=bool)
    h, w = usage.shape
    th, tw = target
    if th % h or tw % w or th // h != tw // w:
        raise ValueError(f"target {target} is not an integer multiple of usage grid {usage.shape}")
    f = th // h
    return SegmentationMask(np.kron(usage, np.ones((f, f), dtype=bool)), source, provenance)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def dilate(mask: SegmentationMask, radius: int) -> SegmentationMask:
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if radius == 0:
        return SegmentationMask(mask.pixels.copy(), mask.source, mask.provenance)
    grown = ndimage.binary_dilation(mask.pixels, structure=disk(radius))
    return SegmentationMask(grown, mask.source, mask.provenance)


def _to_batch(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def class_usage(images, autoencoder, codebook) -> np.ndarray:
    """Boolean ``N x H/f x W/f`` grids marking cells quantized to a class code."""
    x = _to_batch(images).to(codebook.codes.dtype)
    features = encode(x, autoencoder)
    result = vq.quantize(features, codebook, vq.Subset.SHARED_AND_CLASS)
    return result.from_class_partition.cpu().numpy()


def segment_images(images, autoencoder, codebook, dilation_radius: int = 0,
                   provenance=None, batch_size: int = 32) -> list[SegmentationMask]:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    h, w = arr.shape[1:3]
    masks = []
    for start in range(0, len(arr), batch_size):
        usage = class_usage(arr[start:start + batch_size], autoencoder, codebook)
        for k, grid in enumerate(usage):
            ident = provenance[start + k] if provenance is not None else ""
            mask = extract_mask(grid, (h, w), "cacl", ident)
            masks.append(dilate(mask, dilation_radius))
    return masks


def segment_image(checkpoint, image, dilation_radius: int = 0, provenance: str = "") -> SegmentationMask:
    """Encode, quantize over S+C, mark class-code cells, upsample, optionally dilate.

    ``checkpoint`` is anything exposing ``autoencoder`` and ``codebook``
    (a loaded checkpoint or a live training state).
    """
    return segment_images(np.asarray(image)[None], checkpoint.autoencoder, checkpoint.codebook,
                          dilation_radius, [provenance])[0]


def overlay(image: np.ndarray, mask: SegmentationMask, color=(0.0, 1.0, 0.0), alpha: float = 0.4) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64).copy()
    m = mask.pixels
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color)
    return out


def cacl_predictor(checkpoint, dilation_radius: int = 0):
    """Callable mapping one image to ``(mask, probability)`` with hard 0/1 probabilities."""
    def predict(image):
        mask = segment_image(checkpoint, image, dilation_radius).pixels
        return mask, mask.astype(np.float64)
    return predict
