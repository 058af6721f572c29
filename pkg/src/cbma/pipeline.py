"""Statistic plus inference for one dataset, shared by the CLI and power sweeps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .data import BrainMask, FociDataset, StatImage
from .inference import (
    ExactHistogramNull,
    MonteCarloNulls,
    ThresholdResult,
    cluster_fwe,
    exact_null,
    fdr_threshold,
    fixed_threshold,
    fwe_threshold,
    mc_nulls,
    mc_voxel_null,
    p_uncorrected,
)
from .kernels import KernelSpec, study_maps
from .statistics import StudyWeights, config_key, statistic_from_maps, weights_from_participants

PROCEDURES = ("fdr", "fwe", "fixed", "cluster")
VOXEL_NULLS = ("exact", "mc")


@dataclass(frozen=True)
class InferenceSpec:
    """How to turn a statistic image into a significance map.

    ``procedure`` is one of ``fdr`` (Benjamini-Hochberg on voxel-wise p),
    ``fwe`` (voxel-wise max-statistic Monte Carlo), ``fixed`` (p < p_cut) or
    ``cluster`` (cluster-extent FWE with a p < forming_p forming threshold).
    ``voxel_null`` picks the exact null or a Monte Carlo estimate of it with
    ``mc_draws`` draws.
    """

    procedure: str = "fdr"
    alpha: float = 0.05
    n_iter: int = 1000
    p_cut: float = 0.001
    forming_p: float = 0.001
    voxel_null: str = "exact"
    mc_draws: int = 1_000_000
    connectivity: int = 26

    def __post_init__(self):
        if self.procedure not in PROCEDURES:
            raise ValueError(f"procedure must be one of {PROCEDURES}")
        if self.voxel_null not in VOXEL_NULLS:
            raise ValueError(f"voxel_null must be one of {VOXEL_NULLS}")
        for name in ("alpha", "p_cut", "forming_p"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1)")
        if self.procedure in ("fwe", "cluster") and self.n_iter < 100:
            raise ValueError("n_iter must be >= 100 for Monte Carlo FWE")
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")

    @property
    def needs_voxel_null(self) -> bool:
        return self.procedure != "fwe"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Analysis:
    stat: StatImage
    result: ThresholdResult
    voxel_null: ExactHistogramNull | None
    mc: MonteCarloNulls | None
    weights: StudyWeights | None


def resolve_weights(dataset: FociDataset, kernel: KernelSpec, weights=None, exponent: float = 1.0):
    if kernel.method == "ALE":
        return None
    return weights or weights_from_participants(dataset, exponent)


def analyze(
    dataset: FociDataset,
    kernel: KernelSpec,
    mask: BrainMask,
    spec: InferenceSpec,
    seed: int = 0,
    weights: StudyWeights | None = None,
    assume_positive: bool = False,
    n_jobs: int = 1,
    mc: MonteCarloNulls | None = None,
    resolve_tail: bool = True,
) -> Analysis:
    """Compute the statistic image and threshold it according to ``spec``.

    A precomputed ``mc`` null (for instance from a cache) is used as is. With
    ``resolve_tail`` the exact null keeps relative accuracy up to the image
    maximum, so very small p-values are not rounded to 0; thresholding
    decisions at usual alpha levels do not depend on it.
    """
    weights = resolve_weights(dataset, kernel, weights)
    maps = list(study_maps(dataset, kernel, mask, assume_positive))
    stat = statistic_from_maps(maps, kernel.method, weights, mask)
    stat.config_key = config_key(dataset, kernel, weights, mask)

    null = None
    if spec.needs_voxel_null:
        if spec.voxel_null == "exact":
            tail_to = stat.max() if resolve_tail and stat.values.size else None
            null = exact_null(maps, kernel.method, mask, weights, tail_to=tail_to)
        else:
            null = mc_voxel_null(maps, kernel.method, mask, spec.mc_draws, seed, weights)
    del maps

    if spec.procedure == "fdr":
        result = fdr_threshold(p_uncorrected(stat, null), mask, spec.alpha, stat, spec.connectivity)
    elif spec.procedure == "fixed":
        result = fixed_threshold(p_uncorrected(stat, null), mask, spec.p_cut, stat, spec.connectivity)
    else:
        forming = (null, spec.forming_p) if spec.procedure == "cluster" else None
        if mc is None:
            mc = mc_nulls(dataset, kernel, mask, spec.n_iter, seed, weights, assume_positive,
                          cluster_forming=forming, connectivity=spec.connectivity, n_jobs=n_jobs)
        if spec.procedure == "fwe":
            result = fwe_threshold(stat, mc.max_stat, spec.alpha, spec.connectivity)
        else:
            if mc.max_cluster is None:
                raise ValueError("cluster inference needs a cluster-size null")
            p = p_uncorrected(stat, null)
            result = cluster_fwe(stat, p, spec.forming_p, mc.max_cluster, spec.alpha, spec.connectivity)
    return Analysis(stat, result, null, mc, weights)
