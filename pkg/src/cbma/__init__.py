"""Coordinate-based meta-analysis: MKDA, ALE and SDM statistics, exact and
Monte Carlo null distributions, FDR/FWE thresholding and power simulations."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    BrainMask,
    FociDataset,
    Focus,
    StatImage,
    Study,
    VolumeGrid,
    ellipsoid_mask,
    euclidean_distance,
    load_foci_csv,
    save_foci_csv,
    voxel_to_world,
    world_to_voxel,
)
from .inference import (  # noqa: E402
    EmpiricalMaxNull,
    ExactHistogramNull,
    ale_exact_null,
    cluster_fwe,
    cluster_label,
    exact_null,
    fdr_threshold,
    fwe_threshold,
    mc_null_max,
    mc_nulls,
    p_uncorrected,
)
from .kernels import KernelSpec, ale_focus_map, ale_study_map, mkda_study_map, sdm_study_map, study_map  # noqa: E402
from .pipeline import InferenceSpec, analyze  # noqa: E402
from .statistics import (  # noqa: E402
    StudyWeights,
    ale_statistic,
    compute_statistic,
    mkda_statistic,
    sdm_statistic,
    weights_from_participants,
)
