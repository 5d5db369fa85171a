"""Hybrid real/fake + positive/negative classifier and its image pools."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from . import codebook as vq

# class indices of the 4-way classifier
REAL_POS, REAL_NEG, FAKE_POS, FAKE_NEG = 0, 1, 2, 3
NUM_TARGETS = 4

UNIFORM_LOSS = math.log(NUM_TARGETS)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, groups: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.GroupNorm(min(groups, cout), cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ResidualClassifier(nn.Module):
    """ResNet-style classifier emitting 4 logits per image.

    The default is a reduced-depth network (one block per stage, widths
    16-32-64-128). ``ResidualClassifier.resnet18()`` builds the full
    2-2-2-2 / 64-512 layout. The stem downsamples by 2. Group normalization
    keeps the forward pass free of running statistics.
    """

    def __init__(self, widths=(16, 32, 64, 128), blocks=(1, 1, 1, 1), num_outputs: int = NUM_TARGETS):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(min(4, widths[0]), widths[0]),
            nn.ReLU(),
        )
        layers = []
        cin = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            for j in range(n):
                stride = 2 if (j == 0 and i > 0) else 1
                layers.append(BasicBlock(cin, w, stride))
                cin = w
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, num_outputs)

    @classmethod
    def resnet18(cls) -> "ResidualClassifier":
        return cls(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2))

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(x.mean(dim=(2, 3)))


class ImagePool:
    """Buffer of past reconstructions, queried one image at a time.

    Below capacity every image is stored and returned. At capacity, with
    probability 0.5 a uniformly chosen stored image is returned and replaced by
    the new one; otherwise the new image is returned untouched.
    """

    def __init__(self, capacity: int = 50, seed: int = 0):
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self.stored: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.stored)

    def query_one(self, image: torch.Tensor) -> torch.Tensor:
        image = image.detach().clone()
        if len(self.stored) < self.capacity:
            self.stored.append(image)
            return image
        if self.rng.random() < 0.5:
            j = int(self.rng.integers(len(self.stored)))
            old = self.stored[j]
            self.stored[j] = image
            return old
        return image

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[0] == 0:
            return images.detach()
        return torch.stack([self.query_one(img) for img in images])

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "stored": list(self.stored),
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict):
        self.capacity = state["capacity"]
        self.stored = list(state["stored"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state["rng"]


def pool_query(pool: ImagePool, image: torch.Tensor) -> torch.Tensor:
    return pool.query_one(image)


def _nll(logits: torch.Tensor, target: int) -> torch.Tensor:
    """Summed cross-entropy of a batch of logits against a single class."""
    targets = torch.full((logits.shape[0],), target, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, targets, reduction="sum")


def classifier_loss(real_pos: torch.Tensor, real_neg: torch.Tensor, pooled_fake_pos: torch.Tensor,
                    pooled_fake_neg: torch.Tensor, params: ResidualClassifier) -> torch.Tensor:
    """Cross-entropy over the four groups, averaged per image.

    Fake inputs are detached so only the classifier receives gradient. Empty
    groups are skipped.
    """
    groups = [(real_pos, REAL_POS), (real_neg, REAL_NEG),
              (pooled_fake_pos, FAKE_POS), (pooled_fake_neg, FAKE_NEG)]
    groups = [(vq.stop_gradient(x) if t in (FAKE_POS, FAKE_NEG) else x, t)
              for x, t in groups if x is not None and x.shape[0] > 0]
    if not groups:
        return torch.zeros(())
    total = sum(_nll(params(x), t) for x, t in groups)
    return total / sum(x.shape[0] for x, _ in groups)


def mapping_loss(recon_pos: torch.Tensor, recon_neg: torch.Tensor,
                 params: ResidualClassifier) -> torch.Tensor:
    """Push ``Cls(R_P)`` toward real-positive and ``Cls(R_N)`` toward real-negative.

    The classifier acts as a fixed mapping here: its parameters are detached
    so only the reconstructions (and through them the generator) get gradient.
    """
    frozen = {k: v.detach() for k, v in params.named_parameters()}
    frozen.update({k: v for k, v in params.named_buffers()})
    groups = [(x, t) for x, t in ((recon_pos, REAL_POS), (recon_neg, REAL_NEG))
              if x is not None and x.shape[0] > 0]
    if not groups:
        return torch.zeros(())
    total = sum(_nll(functional_call(params, frozen, (x,)), t) for x, t in groups)
    return total / sum(x.shape[0] for x, _ in groups)
