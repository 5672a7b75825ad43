"""Pairwise similarity between the feature maps of one conv layer.

Two measures are supported. ``ssim`` is the structural similarity index
computed globally over whole maps (single window): with per-map mean mu,
population variance sigma^2, population covariance sigma_ab, and stabilizers
built from the dynamic range D of the whole layer output for that image,

    s = (2*mu_a*mu_b + (k1*D)^2) * (2*sigma_ab + (k2*D)^2)
        / ((mu_a^2 + mu_b^2 + (k1*D)^2) * (sigma_a^2 + sigma_b^2 + (k2*D)^2))

``neg_euclidean`` is -sqrt(sum of squared pixel differences); it orders pairs
the same way PSNR does, with larger meaning more similar. Per-image scores are
averaged over the probe set in float64, in image order, so results do not
depend on worker scheduling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import ProbeSet
from .inference import Engine, capture_stack, FeatureMapStack
from .model_ir import Model, PruneBlock

MEASURE_KINDS = ("ssim", "neg_euclidean")


@dataclass
class SimilarityMeasure:
    kind: str = "ssim"
    k1: float = 0.01
    k2: float = 0.03
    degenerate_range_epsilon: float = 1e-12

    def __post_init__(self):
        if self.kind not in MEASURE_KINDS:
            raise ValueError(f"unknown similarity measure {self.kind!r}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")


@dataclass
class SimilarityMatrix:
    layer_id: int
    n: int
    scores: np.ndarray  # (n, n) float64, symmetric, diagonal is NaN sentinel
    measure: SimilarityMeasure
    m_images: int


def dynamic_range(stack: FeatureMapStack) -> float:
    """max - min over every channel and pixel of one layer output."""
    maps = stack.maps
    if maps.size == 0:
        raise ValueError("empty feature-map stack")
    return float(maps.max() - maps.min())


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    d: float,
    k1: float = 0.01,
    k2: float = 0.03,
    degenerate_range_epsilon: float = 1e-12,
) -> float:
    """Whole-map structural similarity of two equally sized 2D maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map extents differ: {a.shape} vs {b.shape}")
    if d < degenerate_range_epsilon:
        d = degenerate_range_epsilon
    mu_a = a.mean()
    mu_b = b.mean()
    va = a - mu_a
    vb = b - mu_b
    var_a = np.mean(va * va)
    var_b = np.mean(vb * vb)
    cov = np.mean(va * vb)
    c1 = (k1 * d) ** 2
    c2 = (k2 * d) ** 2
    return float(
        ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    )


def neg_euclidean(a: np.ndarray, b: np.ndarray) -> float:
    """Negative L2 distance between two maps; 0 means identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map extents differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(-np.sqrt(np.sum(diff * diff)))


def _ssim_matrix(maps: np.ndarray, d: float, measure: SimilarityMeasure) -> np.ndarray:
    if d < measure.degenerate_range_epsilon:
        d = measure.degenerate_range_epsilon
    n, p = maps.shape
    mu = maps.mean(axis=1)
    centered = maps - mu[:, None]
    cov = centered @ centered.T / p  # cov[m, m] is the population variance
    var = np.diag(cov)
    c1 = (measure.k1 * d) ** 2
    c2 = (measure.k2 * d) ** 2
    num = (2.0 * np.outer(mu, mu) + c1) * (2.0 * cov + c2)
    den = (mu[:, None] ** 2 + mu[None, :] ** 2 + c1) * (var[:, None] + var[None, :] + c2)
    return num / den


def _neg_euclidean_matrix(maps: np.ndarray) -> np.ndarray:
    n = maps.shape[0]
    out = np.zeros((n, n), dtype=np.float64)
    for m in range(n - 1):
        diff = maps[m + 1 :] - maps[m]
        out[m, m + 1 :] = -np.sqrt(np.sum(diff * diff, axis=1))
    return out + out.T


def pairwise_similarity(
    model: Model, block: PruneBlock, probe: ProbeSet, measure: SimilarityMeasure
) -> SimilarityMatrix:
    """Score every unordered feature-map pair at the block's capture point,
    averaged over the probe images."""
    if not len(probe):
        raise ValueError("probe set is empty")
    engine = Engine(model)
    acc: np.ndarray | None = None
    for k, img in enumerate(probe.images):
        stack = capture_stack(engine, img, block.capture_id, image_index=k)
        maps = stack.maps.astype(np.float64).reshape(stack.maps.shape[0], -1)
        if measure.kind == "ssim":
            d = dynamic_range(stack)
            s = _ssim_matrix(maps, d, measure)
        else:
            s = _neg_euclidean_matrix(maps)
        acc = s if acc is None else acc + s
    scores = acc / len(probe)
    # Exact symmetry: mirror the strict upper triangle, NaN sentinel diagonal.
    iu = np.triu_indices(scores.shape[0], k=1)
    sym = np.full_like(scores, np.nan)
    sym[iu] = scores[iu]
    sym[(iu[1], iu[0])] = scores[iu]
    return SimilarityMatrix(
        layer_id=block.conv_id,
        n=scores.shape[0],
        scores=sym,
        measure=measure,
        m_images=len(probe),
    )


def dump_matrix(matrix: SimilarityMatrix, path: str | Path) -> None:
    """Write (layer, m, n, score) rows for external analysis."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "m", "n", "score"])
        for m in range(matrix.n):
            for n in range(m + 1, matrix.n):
                w.writerow([matrix.layer_id, m, n, repr(float(matrix.scores[m, n]))])
