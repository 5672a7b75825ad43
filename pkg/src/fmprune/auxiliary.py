"""Per-channel statistics that break ties inside a similar feature-map pair.

The default is the numerical rank of each 2D map averaged over the probe set;
L1 norm and seeded random scores are the alternative tie-breakers and also
drive the baseline selectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import ProbeSet
from .inference import Engine, capture_stack
from .model_ir import Model, PruneBlock

DEFAULT_RANK_POLICY = "max_dim*sigma_max*eps"
UNIMPORTANT_THRESHOLD = 1e-30

AUX_KINDS = ("rank", "l1_norm", "random")


@dataclass
class RankVector:
    layer_id: int
    ranks: np.ndarray  # float64, fractional after averaging over images
    tol_policy: str = DEFAULT_RANK_POLICY

    @property
    def values(self) -> np.ndarray:
        return self.ranks


@dataclass
class AuxiliaryScore:
    kind: str
    values: np.ndarray
    seed: int | None = None


def matrix_rank(map2d: np.ndarray, tol: float | None = None) -> int:
    """Singular values above tolerance; default tol = max(X,Y)*sigma_max*eps."""
    a = np.asarray(map2d, dtype=np.float64)
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0:
        return 0
    if tol is None:
        tol = max(a.shape) * s[0] * np.finfo(np.float64).eps
    return int(np.count_nonzero(s > tol))


def avg_rank(model: Model, block: PruneBlock, probe: ProbeSet, tol: float | None = None) -> RankVector:
    """Mean numerical rank of each channel's map over the probe images."""
    if not len(probe):
        raise ValueError("probe set is empty")
    engine = Engine(model)
    totals: np.ndarray | None = None
    for k, img in enumerate(probe.images):
        stack = capture_stack(engine, img, block.capture_id, image_index=k)
        ranks = np.array([matrix_rank(m, tol) for m in stack.maps], dtype=np.float64)
        totals = ranks if totals is None else totals + ranks
    policy = DEFAULT_RANK_POLICY if tol is None else f"abs={tol!r}"
    return RankVector(layer_id=block.conv_id, ranks=totals / len(probe), tol_policy=policy)


def l1_scores(model: Model, block: PruneBlock, probe: ProbeSet) -> AuxiliaryScore:
    """Mean sum of absolute pixel values per channel over the probe images."""
    if not len(probe):
        raise ValueError("probe set is empty")
    engine = Engine(model)
    totals: np.ndarray | None = None
    for k, img in enumerate(probe.images):
        stack = capture_stack(engine, img, block.capture_id, image_index=k)
        norms = np.abs(stack.maps.astype(np.float64)).sum(axis=(1, 2))
        totals = norms if totals is None else totals + norms
    return AuxiliaryScore(kind="l1_norm", values=totals / len(probe))


def random_scores(n: int, seed: int) -> AuxiliaryScore:
    """One uniform draw per channel; reproducible from the seed."""
    rng = np.random.default_rng(seed)
    return AuxiliaryScore(kind="random", values=rng.random(n), seed=seed)


def detect_unimportant_filters(
    model: Model, threshold: float = UNIMPORTANT_THRESHOLD
) -> dict[int, dict]:
    """Per conv layer: filters whose every weight magnitude is below threshold.

    Deleting these channels (with rewiring) is output-preserving up to the BN
    shift they carry, which is why near-zero filters are safe to drop.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    report: dict[int, dict] = {}
    for cid in model.conv_ids():
        w = model.layers[cid].tensors["weight"]
        flagged = [j for j in range(w.shape[0]) if np.abs(w[j]).max() < threshold]
        report[cid] = {
            "fraction": len(flagged) / w.shape[0],
            "indices": flagged,
            "filters": w.shape[0],
        }
    return report
