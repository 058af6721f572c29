"""Combine study maps into the MKDA, ALE and SDM statistic images."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .data import BrainMask, FociDataset, StatImage
from .kernels import KernelSpec, StudyMap, study_maps


class MaskMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StudyWeights:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals or min(vals) <= 0:
            raise ValueError("study weights must be positive")
        object.__setattr__(self, "values", vals)

    @property
    def total(self) -> float:
        return float(np.sum(self.values))

    def __len__(self):
        return len(self.values)

    @classmethod
    def uniform(cls, n: int) -> StudyWeights:
        return cls((1.0,) * n)


def weights_from_participants(dataset: FociDataset, exponent: float = 1.0) -> StudyWeights:
    """w_i = n_i ** exponent."""
    if exponent < 0:
        raise ValueError("exponent must be nonnegative")
    return StudyWeights(tuple(float(s.n_participants) ** exponent for s in dataset.studies))


def config_key(dataset: FociDataset, kernel: KernelSpec, weights: StudyWeights | None, mask: BrainMask) -> str:
    """Fingerprint of everything that determines a statistic image."""
    payload = {
        "dataset": dataset.sha256(),
        "kernel": kernel.to_dict(),
        "weights": None if weights is None else list(weights.values),
        "mask": mask.sha256,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _check(maps, method):
    mask = None
    for m in maps:
        if m.method != method:
            raise ValueError(f"expected {method} study maps, got {m.method}")
        if mask is None:
            mask = m.mask
        elif m.mask is not mask and m.mask.sha256 != mask.sha256:
            raise MaskMismatch("study maps do not share one mask")
        yield m


def _weighted_mean(maps, weights: StudyWeights, method: str, mask: BrainMask | None) -> StatImage:
    acc = None
    n = 0
    for n, m in enumerate(_check(maps, method), start=1):
        if acc is None:
            mask = mask or m.mask
            if m.mask is not mask and m.mask.sha256 != mask.sha256:
                raise MaskMismatch("study maps do not share the given mask")
            acc = np.zeros(mask.n_in_mask)
        if n > len(weights):
            raise ValueError("more study maps than weights")
        acc[m.positions] += weights.values[n - 1] * m.values
    if acc is None:
        raise ValueError("no study maps")
    if n != len(weights):
        raise ValueError(f"{len(weights)} weights for {n} study maps")
    acc /= weights.total
    return StatImage(acc, method, mask)


def mkda_statistic(maps, weights: StudyWeights, mask: BrainMask | None = None) -> StatImage:
    """Weighted proportion of studies whose indicator map covers each voxel."""
    return _weighted_mean(maps, weights, "MKDA", mask)


def sdm_statistic(maps, weights: StudyWeights, mask: BrainMask | None = None) -> StatImage:
    """Weighted mean of clamped signed study maps."""
    return _weighted_mean(maps, weights, "SDM", mask)


def ale_statistic(maps, mask: BrainMask | None = None) -> StatImage:
    """Union probability 1 - prod(1 - L_i), accumulated as a sum of log1p(-L_i)."""
    acc = None
    for m in _check(maps, "ALE"):
        if acc is None:
            mask = mask or m.mask
            acc = np.zeros(mask.n_in_mask)
        acc[m.positions] += np.log1p(-m.values)
    if acc is None:
        raise ValueError("no study maps")
    return StatImage(-np.expm1(acc), "ALE", mask)


def compute_statistic(
    dataset: FociDataset,
    kernel: KernelSpec,
    mask: BrainMask,
    weights: StudyWeights | None = None,
    assume_positive: bool = False,
) -> StatImage:
    """Study maps plus combination in one pass, without holding all maps in memory."""
    maps = study_maps(dataset, kernel, mask, assume_positive)
    if kernel.method == "ALE":
        stat = ale_statistic(maps, mask)
        weights = None
    else:
        weights = weights or weights_from_participants(dataset, 1.0)
        combine = mkda_statistic if kernel.method == "MKDA" else sdm_statistic
        stat = combine(maps, weights, mask)
    stat.config_key = config_key(dataset, kernel, weights, mask)
    return stat


def statistic_from_maps(maps: list[StudyMap], method: str, weights: StudyWeights | None, mask: BrainMask) -> StatImage:
    if method == "ALE":
        return ale_statistic(maps, mask)
    combine = mkda_statistic if method == "MKDA" else sdm_statistic
    return combine(maps, weights or StudyWeights.uniform(len(maps)), mask)
