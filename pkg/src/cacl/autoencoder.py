"""Encoder/decoder pair and the dual-path (S-only vs S+C) reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import codebook as vq
from .codebook import PartitionedCodebook, QuantizationResult, Subset


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @property
    def is_positive(self) -> bool:
        return self is Label.POSITIVE


@dataclass
class LabeledPatch:
    """An ``H x W x 3`` image in ``[0, 1]`` with its image-level label."""

    pixels: np.ndarray
    label: Label
    ident: str = ""

    def __post_init__(self):
        self.label = Label(self.label)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"patch must be H x W x 3, got {self.pixels.shape}")

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)), dtype=dtype)[None]


@dataclass
class ReconstructionPair:
    recon_positive: torch.Tensor
    recon_negative: torch.Tensor


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class Encoder(nn.Module):
    """Two stride-2 convolutions followed by residual blocks; downsamples by 4."""

    def __init__(self, dim: int = 64, hidden: int = 64, res_hidden: int = 32, num_res: int = 2):
        super().__init__()
        self.down1 = nn.Conv2d(3, hidden // 2, 4, stride=2, padding=1)
        self.down2 = nn.Conv2d(hidden // 2, hidden, 4, stride=2, padding=1)
        self.mix = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.res = nn.Sequential(*[ResidualBlock(hidden, res_hidden) for _ in range(num_res)])
        self.proj = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        x = F.relu(self.down1(x))
        x = F.relu(self.down2(x))
        x = self.res(self.mix(x))
        return self.proj(F.relu(x))


class Decoder(nn.Module):
    def __init__(self, dim: int = 64, hidden: int = 64, res_hidden: int = 32, num_res: int = 2):
        super().__init__()
        self.inp = nn.Conv2d(dim, hidden, 3, padding=1)
        self.res = nn.Sequential(*[ResidualBlock(hidden, res_hidden) for _ in range(num_res)])
        self.up1 = nn.ConvTranspose2d(hidden, hidden // 2, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(hidden // 2, 3, 4, stride=2, padding=1)

    def forward(self, e):
        x = self.res(self.inp(e))
        x = F.relu(self.up1(F.relu(x)))
        return torch.sigmoid(self.up2(x))


class Autoencoder(nn.Module):
    downsample_factor = 4

    def __init__(self, dim: int = 64, hidden: int = 64, res_hidden: int = 32, num_res: int = 2):
        super().__init__()
        self.dim = dim
        self.encoder = Encoder(dim, hidden, res_hidden, num_res)
        self.decoder = Decoder(dim, hidden, res_hidden, num_res)


def _check_divisible(images: torch.Tensor, f: int):
    h, w = images.shape[-2:]
    if h % f or w % f:
        raise ValueError(f"image size {h}x{w} is not divisible by the downsampling factor {f}")


def encode(images: torch.Tensor, params: Autoencoder) -> torch.Tensor:
    """``B x 3 x H x W`` images to a ``B x dim x H/f x W/f`` feature grid."""
    if images.dim() == 3:
        images = images[None]
    _check_divisible(images, params.downsample_factor)
    return params.encoder(images)


def forward_dual(images: torch.Tensor, params: Autoencoder, codebook: PartitionedCodebook,
                 beta: float = 0.25, features: torch.Tensor | None = None
                 ) -> tuple[ReconstructionPair, QuantizationResult, QuantizationResult]:
    """Decode the S+C quantization into ``R_P`` and the S-only one into ``R_N``."""
    if features is None:
        features = encode(images, params)
    e_pos = vq.quantize(features, codebook, Subset.SHARED_AND_CLASS, beta)
    e_neg = vq.quantize(features, codebook, Subset.SHARED_ONLY, beta)
    pair = ReconstructionPair(
        recon_positive=params.decoder(e_pos.quantized),
        recon_negative=params.decoder(e_neg.quantized),
    )
    return pair, e_pos, e_neg


def _as_positive_mask(labels, device=None) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        return labels.to(torch.bool)
    if isinstance(labels, (Label, str)):
        labels = [labels]
    return torch.tensor([Label(l).is_positive for l in labels], dtype=torch.bool, device=device)


def reconstruction_loss(images: torch.Tensor, labels, pair: ReconstructionPair) -> torch.Tensor:
    """Per-patch MSE against the label-selected reconstruction, averaged over the batch.

    Positive patches are compared with ``R_P`` and negative ones with ``R_N``;
    the other reconstruction of each patch receives no gradient.
    """
    if images.dim() == 3:
        images = images[None]
    positive = _as_positive_mask(labels, images.device)
    err_pos = ((images - pair.recon_positive) ** 2).flatten(1).mean(1)
    err_neg = ((images - pair.recon_negative) ** 2).flatten(1).mean(1)
    return torch.where(positive, err_pos, err_neg).mean()


def codebook_divergence_loss(e_neg: QuantizationResult, e_pos: QuantizationResult, labels,
                             margin: float = 1.0, signed: bool = False) -> torch.Tensor:
    """Distance between the S-only and S+C codes on cells that chose a class code.

    Per patch, ``d`` is the mean over C-cells of the squared code difference.
    Negative patches contribute ``d``; positive patches contribute the hinge
    ``max(0, margin - d)`` (or ``-d`` when ``signed``). Patches without any
    C-cell contribute 0. The S-only side is held fixed, so the gradient reaches
    the encoder through the straight-through path of ``e_pos``.
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    positive = _as_positive_mask(labels, e_pos.quantized.device)
    diff = (vq.stop_gradient(e_neg.quantized) - e_pos.quantized) ** 2
    cells = e_pos.from_class_partition.to(diff.dtype)
    n_cells = cells.flatten(1).sum(1)
    d = (diff.sum(1) * cells).flatten(1).sum(1) / n_cells.clamp_min(1.0)
    if signed:
        per_patch = torch.where(positive, -d, d)
    else:
        per_patch = torch.where(positive, F.relu(margin - d), d)
    per_patch = torch.where(n_cells > 0, per_patch, torch.zeros_like(per_patch))
    return per_patch.mean()
