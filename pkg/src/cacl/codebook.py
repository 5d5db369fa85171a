"""Partitioned vector quantization with a shared (S) and a class (C) codebook.

Codes live in a single matrix: rows ``[0, num_shared)`` form the shared
partition and rows ``[num_shared, num_shared + num_class)`` the class
partition. Code vectors are trained by exponential moving averages, never by
gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn


class Subset(str, Enum):
    SHARED_ONLY = "shared_only"
    SHARED_AND_CLASS = "shared_and_class"


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Block gradient flow into ``x``.

    Every stop-gradient in the package goes through this function so that a
    finite-difference check can freeze the stopped values at a base point.
    """
    return x.detach()


class PartitionedCodebook(nn.Module):
    """Codes plus EMA statistics, stored as buffers so they travel with ``state_dict``."""

    def __init__(self, num_shared: int, num_class: int, dim: int, decay: float = 0.99,
                 eps: float = 1e-5, dtype: torch.dtype = torch.float32):
        super().__init__()
        for name, value in (("num_shared", num_shared), ("num_class", num_class), ("dim", dim)):
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.num_shared = int(num_shared)
        self.num_class = int(num_class)
        self.dim = int(dim)
        self.decay = float(decay)
        self.eps = float(eps)
        total = self.num_shared + self.num_class
        self.register_buffer("codes", torch.zeros(total, self.dim, dtype=dtype))
        self.register_buffer("ema_counts", torch.zeros(total, dtype=dtype))
        self.register_buffer("ema_sums", torch.zeros(total, self.dim, dtype=dtype))

    @property
    def num_codes(self) -> int:
        return self.num_shared + self.num_class

    @property
    def shared_codes(self) -> torch.Tensor:
        return self.codes[: self.num_shared]

    @property
    def class_codes(self) -> torch.Tensor:
        return self.codes[self.num_shared:]

    def is_class_code(self, indices: torch.Tensor) -> torch.Tensor:
        return indices >= self.num_shared

    def extra_repr(self) -> str:
        return f"num_shared={self.num_shared}, num_class={self.num_class}, dim={self.dim}, decay={self.decay}"


@dataclass
class QuantizationResult:
    """Output of :func:`quantize` for a batch laid out as ``(B, dim, H, W)``.

    ``quantized`` carries the straight-through gradient to the features it was
    computed from; its forward value is the selected code vector.
    """

    quantized: torch.Tensor
    indices: torch.Tensor
    from_class_partition: torch.Tensor
    commitment_value: torch.Tensor


def init_codebook(num_shared: int, num_class: int, dim: int, seed: int, decay: float = 0.99,
                  dtype: torch.dtype = torch.float32) -> PartitionedCodebook:
    """Codes drawn uniformly from ``[-1/K, 1/K]`` with ``K`` the total code count."""
    book = PartitionedCodebook(num_shared, num_class, dim, decay=decay, dtype=dtype)
    gen = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / book.num_codes
    codes = torch.rand(book.num_codes, book.dim, generator=gen, dtype=torch.float64)
    book.codes.copy_((codes * 2.0 - 1.0) * bound)
    return book


def _allowed_codes(codebook: PartitionedCodebook, subset: Subset | str) -> torch.Tensor:
    subset = Subset(subset)
    if subset is Subset.SHARED_ONLY:
        return codebook.shared_codes
    return codebook.codes


def nearest_codes(flat: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the Euclidean-nearest code for each row of ``flat``.

    Distances are formed from explicit differences rather than the expanded
    ``|z|^2 - 2 z.e + |e|^2`` form, one code at a time, so that duplicated
    codes go through the identical reduction and tie bit-for-bit; the first
    (lowest) index then wins. A single batched ``sum(-1)`` over all codes can
    differ by an ulp between identical rows depending on their position.
    """
    dist = torch.stack([((flat - code) ** 2).sum(-1) for code in codes], dim=1)
    return dist.argmin(dim=1)


def quantize(features: torch.Tensor, codebook: PartitionedCodebook,
             subset: Subset | str = Subset.SHARED_AND_CLASS, beta: float = 0.25) -> QuantizationResult:
    """Snap each spatial cell of ``features`` (``B x dim x H x W``) to its nearest allowed code."""
    if features.dim() != 4 or features.shape[1] != codebook.dim:
        raise ValueError(
            f"expected features of shape (B, {codebook.dim}, H, W), got {tuple(features.shape)}")
    b, d, h, w = features.shape
    flat = features.permute(0, 2, 3, 1).reshape(-1, d)
    allowed = _allowed_codes(codebook, subset).to(features.dtype)
    with torch.no_grad():
        idx = nearest_codes(flat.detach(), allowed)
    codes = allowed[idx].reshape(b, h, w, d).permute(0, 3, 1, 2)
    quantized = features + stop_gradient(codes - features)
    indices = idx.reshape(b, h, w)
    result = QuantizationResult(
        quantized=quantized,
        indices=indices,
        from_class_partition=codebook.is_class_code(indices),
        commitment_value=torch.zeros((), dtype=features.dtype),
    )
    result.commitment_value = commitment_loss(features, result, beta)
    return result


def commitment_loss(features: torch.Tensor, result: QuantizationResult, beta: float = 0.25) -> torch.Tensor:
    """``|sg[z] - e|^2 + beta * |sg[e] - z|^2``, summed over channels and averaged over cells.

    Only the second term reaches the encoder; codes are EMA-trained so the first
    term is reported but carries no gradient.
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    code = stop_gradient(result.quantized)
    codebook_term = ((stop_gradient(features) - code) ** 2).sum(1).mean()
    encoder_term = ((code - features) ** 2).sum(1).mean()
    return codebook_term + beta * encoder_term


@torch.no_grad()
def ema_update(codebook: PartitionedCodebook, features: torch.Tensor, result: QuantizationResult,
               mask: torch.Tensor | None = None) -> PartitionedCodebook:
    """One EMA step of counts, sums and code vectors, applied in place.

    ``mask`` (``B x H x W`` bool) restricts which cells contribute assignments.
    Codes that receive no assignment keep their vectors; only their
    accumulators decay.
    """
    if not 0.0 < codebook.decay < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {codebook.decay}")
    d = codebook.dim
    flat = features.detach().permute(0, 2, 3, 1).reshape(-1, d).to(codebook.codes.dtype)
    idx = result.indices.reshape(-1)
    if mask is not None:
        keep = mask.reshape(-1)
        flat, idx = flat[keep], idx[keep]
    counts = torch.bincount(idx, minlength=codebook.num_codes).to(codebook.codes.dtype)
    sums = torch.zeros_like(codebook.ema_sums).index_add_(0, idx, flat)
    decay = codebook.decay
    codebook.ema_counts.mul_(decay).add_(counts, alpha=1.0 - decay)
    codebook.ema_sums.mul_(decay).add_(sums, alpha=1.0 - decay)
    hit = counts > 0
    denom = codebook.ema_counts[hit].clamp_min(codebook.eps)
    codebook.codes[hit] = codebook.ema_sums[hit] / denom[:, None]
    return codebook


@torch.no_grad()
def dead_code_reinit(codebook: PartitionedCodebook, usage_window: torch.Tensor, threshold: int,
                     seed: int, candidates: torch.Tensor,
                     class_candidates: torch.Tensor | None = None) -> torch.Tensor:
    """Re-seed codes used ``<= threshold`` times to randomly chosen encoder outputs.

    ``candidates`` is an ``N x dim`` pool of recent encoder outputs. Class codes
    draw from ``class_candidates`` when given. Accumulators of a re-seeded code
    are reset to a unit count at the new vector. Returns the replaced indices.
    """
    if usage_window.shape[0] != codebook.num_codes:
        raise ValueError("usage_window must hold one count per code")
    dead = torch.nonzero(usage_window <= threshold).flatten()
    if dead.numel() == 0:
        return dead
    gen = torch.Generator().manual_seed(int(seed))
    replaced = []
    for k in dead.tolist():
        pool = candidates
        if k >= codebook.num_shared and class_candidates is not None:
            pool = class_candidates
        if pool is None or pool.shape[0] == 0:
            continue
        j = int(torch.randint(pool.shape[0], (1,), generator=gen))
        vec = pool[j].to(codebook.codes.dtype)
        codebook.codes[k] = vec
        codebook.ema_sums[k] = vec
        codebook.ema_counts[k] = 1.0
        replaced.append(k)
    return torch.tensor(replaced, dtype=torch.long)
