"""Color-deconvolution baseline: optical density, stain unmixing, DAB thresholding."""

from __future__ import annotations

import numpy as np

OD_EPS = 1.0 / 255.0

# Ruifrok & Johnston stain OD vectors
HEMATOXYLIN = (0.650, 0.704, 0.286)
DAB = (0.268, 0.570, 0.776)
HEMATOXYLIN_HE = (0.644, 0.717, 0.267)
EOSIN = (0.093, 0.954, 0.283)


def stain_matrix(first=HEMATOXYLIN, second=DAB, third=None) -> np.ndarray:
    """Rows are unit OD vectors; a missing third row is the normalized cross product."""
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    c = np.cross(a, b) if third is None else np.asarray(third, dtype=np.float64)
    c = c / np.linalg.norm(c)
    return np.stack([a, b, c])


H_DAB = stain_matrix()
H_E = stain_matrix(HEMATOXYLIN_HE, EOSIN)
STAIN_MATRICES = {"hdab": H_DAB, "he": H_E}


def rgb_to_od(image) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), OD_EPS, 1.0)
    return -np.log10(img)


def od_to_rgb(od) -> np.ndarray:
    return np.power(10.0, -np.asarray(od, dtype=np.float64))


def deconvolve(od, stains=H_DAB) -> np.ndarray:
    """Solve ``od = c @ stains`` per pixel and clamp concentrations at 0."""
    stains = np.asarray(stains, dtype=np.float64)
    if stains.shape != (3, 3):
        raise ValueError("stain matrix must be 3x3")
    cond = np.linalg.cond(stains)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError(f"stain matrix is singular (condition number {cond:.3g})")
    od = np.asarray(od, dtype=np.float64)
    conc = np.linalg.solve(stains.T, od.reshape(-1, 3).T).T
    return np.maximum(conc, 0.0).reshape(od.shape)


def dab_concentration(image, stains=H_DAB, channel: int = 1) -> np.ndarray:
    return deconvolve(rgb_to_od(image), stains)[..., channel]


def threshold_dab(concentration, threshold: float) -> np.ndarray:
    return np.asarray(concentration) > threshold


def soft_probability(concentration, threshold: float, scale: float = 0.05) -> np.ndarray:
    """Sigmoid of ``(concentration - threshold) / scale``; used for the soft BCE variant."""
    z = (np.asarray(concentration, dtype=np.float64) - threshold) / scale
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def colordeconv_predictor(threshold: float, stains=H_DAB, channel: int = 1, soft: bool = False):
    """Callable mapping one ``H x W x 3`` image to ``(mask, probability)``.

    The probability is the hard mask unless ``soft`` is set.
    """
    def predict(image):
        conc = dab_concentration(image, stains, channel)
        mask = threshold_dab(conc, threshold)
        prob = soft_probability(conc, threshold) if soft else mask.astype(np.float64)
        return mask, prob
    return predict


def threshold_grid(concentrations, n: int = 101) -> np.ndarray:
    """Candidate thresholds at evenly spaced quantiles of the pooled concentrations."""
    pooled = np.concatenate([np.ravel(c) for c in concentrations])
    return np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, n)))
