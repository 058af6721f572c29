"""Per-focus and per-study kernel maps for MKDA, ALE and SDM.

Maps are stored sparsely over mask positions: a :class:`StudyMap` keeps the
positions where the map is nonzero and the values there. Everything else in
the mask is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import BrainMask, Focus, Study, VolumeGrid

ALE_TRUNCATION_SD = 5.0
# SDM kernels are evaluated where exp(-d^2 / 2 sigma^2) >= 1e-12.
SDM_TRUNCATION_SD = math.sqrt(2.0 * math.log(1e12))
ALE_REFERENCE_N = 12
ALE_REFERENCE_SIGMA = 4.0


class FocusMassUnderflow(ValueError):
    """An ALE focus lies so far from the mask that no in-mask voxel gets kernel mass."""


class MissingTValue(ValueError):
    """An SDM focus has no signed statistic and no sign policy was given."""


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel to place on each focus.

    ``sigma_mm=None`` for ALE selects the per-study width from the sample size.
    """

    method: str
    radius_mm: float | None = None
    sigma_mm: float | None = None

    def __post_init__(self):
        if self.method == "MKDA":
            if self.radius_mm is None or not self.radius_mm > 0:
                raise ValueError("MKDA kernel needs radius_mm > 0")
        elif self.method == "ALE":
            if self.sigma_mm is not None and not self.sigma_mm > 0:
                raise ValueError("ALE sigma_mm must be > 0")
        elif self.method == "SDM":
            if self.sigma_mm is None or not self.sigma_mm > 0:
                raise ValueError("SDM kernel needs sigma_mm > 0")
        else:
            raise ValueError(f"unknown kernel method {self.method!r}")

    @classmethod
    def mkda(cls, radius_mm: float) -> KernelSpec:
        return cls("MKDA", radius_mm=float(radius_mm))

    @classmethod
    def ale(cls, sigma_mm: float | None = None) -> KernelSpec:
        return cls("ALE", sigma_mm=None if sigma_mm is None else float(sigma_mm))

    @classmethod
    def sdm(cls, sigma_mm: float) -> KernelSpec:
        return cls("SDM", sigma_mm=float(sigma_mm))

    def describe(self) -> str:
        if self.method == "MKDA":
            return f"MKDA(r={self.radius_mm:g}mm)"
        if self.sigma_mm is None:
            return "ALE(sigma=from-sample-size)"
        return f"{self.method}(sigma={self.sigma_mm:g}mm)"

    def to_dict(self) -> dict:
        return {"method": self.method, "radius_mm": self.radius_mm, "sigma_mm": self.sigma_mm}


@dataclass(eq=False)
class StudyMap:
    """Sparse per-study map over mask positions."""

    mask: BrainMask
    study_id: str
    method: str
    positions: np.ndarray
    values: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros(self.mask.n_in_mask)
        out[self.positions] = self.values
        return out

    @property
    def grid(self) -> VolumeGrid:
        return self.mask.to_grid(self.dense())

    def value_counts(self):
        """Distinct nonzero values with their voxel counts, plus the zero count."""
        vals, counts = np.unique(self.values, return_counts=True)
        return vals, counts, self.mask.n_in_mask - self.positions.size


@lru_cache(maxsize=8)
def _axes(mask: BrainMask):
    return tuple(
        mask.origin[d] + mask.voxel_size[d] * np.arange(mask.dims[d]) for d in range(3)
    )


def _neighbourhood(xyz, radius: float, mask: BrainMask):
    """Mask positions and squared distances of in-mask voxel centers within ``radius`` of ``xyz``."""
    axes = _axes(mask)
    lo, hi, d2 = [], [], []
    for d in range(3):
        s, o, n = mask.voxel_size[d], mask.origin[d], mask.dims[d]
        a = max(math.ceil((xyz[d] - radius - o) / s) - 1, 0)
        b = min(math.floor((xyz[d] + radius - o) / s) + 1, n - 1)
        if a > b:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        lo.append(a)
        hi.append(b)
        d2.append((axes[d][a : b + 1] - xyz[d]) ** 2)
    pos = mask.position[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    dist2 = d2[0][:, None, None] + d2[1][None, :, None] + d2[2][None, None, :]
    keep = (pos >= 0) & (dist2 <= radius * radius)
    return pos[keep], dist2[keep]


def _reduce(positions, values, how: str):
    """Combine overlapping focus maps by position, in a fixed order."""
    if not positions:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    pos = np.concatenate(positions)
    val = np.concatenate(values)
    if len(positions) == 1:
        order = np.argsort(pos, kind="stable")
        return pos[order], val[order]
    order = np.argsort(pos, kind="stable")
    pos, val = pos[order], val[order]
    starts = np.flatnonzero(np.r_[True, pos[1:] != pos[:-1]])
    ufunc = np.maximum if how == "max" else np.add
    return pos[starts], ufunc.reduceat(val, starts)


def mkda_study_map(study: Study, radius_mm: float, mask: BrainMask) -> StudyMap:
    """Binary map: 1 where some focus lies within ``radius_mm`` of the voxel center."""
    if not radius_mm > 0:
        raise ValueError("radius_mm must be > 0")
    hits = [_neighbourhood(f.xyz, radius_mm, mask)[0] for f in study.foci]
    pos = np.unique(np.concatenate(hits)) if hits else np.zeros(0, dtype=np.int64)
    return StudyMap(mask, study.id, "MKDA", pos, np.ones(pos.size))


def ale_sigma(n_participants: int, sigma_mm: float | None = None) -> float:
    """Gaussian width for a study.

    A fixed ``sigma_mm`` is returned unchanged. Otherwise the width follows a
    1/sqrt(n) precision law anchored at 4 mm for 12 participants.
    """
    if n_participants < 1:
        raise ValueError("n_participants must be >= 1")
    if sigma_mm is not None:
        return float(sigma_mm)
    return ALE_REFERENCE_SIGMA * math.sqrt(ALE_REFERENCE_N / n_participants)


def _ale_focus_values(xyz, sigma_mm: float, mask: BrainMask):
    pos, d2 = _neighbourhood(xyz, ALE_TRUNCATION_SD * sigma_mm, mask)
    dens = np.exp(-d2 / (2.0 * sigma_mm * sigma_mm))
    # fsum is correctly rounded, so the normalizer does not depend on summation order
    total = math.fsum(dens) if dens.size else 0.0
    if not total > 0:
        raise FocusMassUnderflow(f"focus mass underflow: no in-mask voxel within {ALE_TRUNCATION_SD:g} sd of {tuple(xyz)}")
    return pos, dens / total


def ale_focus_map(focus: Focus, sigma_mm: float, mask: BrainMask) -> VolumeGrid:
    """Truncated Gaussian focus map normalized to unit mass over the mask."""
    if not sigma_mm > 0:
        raise ValueError("sigma_mm must be > 0")
    pos, vals = _ale_focus_values(focus.xyz, sigma_mm, mask)
    dense = np.zeros(mask.n_in_mask)
    dense[pos] = vals
    return mask.to_grid(dense)


def ale_study_map(study: Study, sigma_mm: float, mask: BrainMask) -> StudyMap:
    """Modelled activation map: voxel-wise maximum over the study's focus maps."""
    if not sigma_mm > 0:
        raise ValueError("sigma_mm must be > 0")
    parts = [_ale_focus_values(f.xyz, sigma_mm, mask) for f in study.foci]
    pos, val = _reduce([p for p, _ in parts], [v for _, v in parts], "max")
    return StudyMap(mask, study.id, "ALE", pos, val)


def focus_sign(focus: Focus, assume_positive: bool = False) -> float:
    if focus.t_value is None:
        if assume_positive:
            return 1.0
        raise MissingTValue("SDM needs a t_value for every focus (or the assume-positive policy)")
    return 1.0 if focus.t_value > 0 else -1.0


def sdm_study_map(study: Study, sigma_mm: float, mask: BrainMask, assume_positive: bool = False) -> StudyMap:
    """Signed, unnormalized Gaussian sum clamped to [-1, 1]."""
    if not sigma_mm > 0:
        raise ValueError("sigma_mm must be > 0")
    positions, values = [], []
    for f in study.foci:
        sign = focus_sign(f, assume_positive)
        pos, d2 = _neighbourhood(f.xyz, SDM_TRUNCATION_SD * sigma_mm, mask)
        positions.append(pos)
        values.append(sign * np.exp(-d2 / (2.0 * sigma_mm * sigma_mm)))
    pos, val = _reduce(positions, values, "sum")
    np.clip(val, -1.0, 1.0, out=val)
    keep = val != 0
    return StudyMap(mask, study.id, "SDM", pos[keep], val[keep])


def study_map(study: Study, kernel: KernelSpec, mask: BrainMask, assume_positive: bool = False) -> StudyMap:
    if kernel.method == "MKDA":
        return mkda_study_map(study, kernel.radius_mm, mask)
    if kernel.method == "ALE":
        return ale_study_map(study, ale_sigma(study.n_participants, kernel.sigma_mm), mask)
    return sdm_study_map(study, kernel.sigma_mm, mask, assume_positive)


def study_maps(dataset, kernel: KernelSpec, mask: BrainMask, assume_positive: bool = False):
    """Lazily yield one map per study, in dataset order."""
    for study in dataset.studies:
        yield study_map(study, kernel, mask, assume_positive)
