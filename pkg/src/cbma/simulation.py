"""Synthetic CBMA datasets: valid studies cluster around population centers,
noise studies report foci uniformly over the mask."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import BrainMask, FociDataset, Focus, Study, study_id

LGR = logging.getLogger(__name__)

DEFAULT_REPORT_DIST = {0: 0.35, 1: 0.50, 2: 0.10, 3: 0.05}
DEFAULT_SCATTER_SD = 4.0
DEFAULT_PARTICIPANTS = 12
MAX_REDRAWS = 10_000
MIN_CENTER_SEPARATION = 40.0
# centers sit at the vertices of a box spanning this fraction of the mask's half-extent
CENTER_BOX_FRACTION = 0.4

VALID, NOISE = "valid", "noise"


class SimulationError(ValueError):
    pass


def default_centers(mask: BrainMask) -> tuple[tuple[float, float, float], ...]:
    """Eight centers at the vertices of a box around the middle of the mask.

    The box is centered on the midpoint of the mask's bounding box and spans
    ``CENTER_BOX_FRACTION`` of its half-extent along each axis.
    """
    coords = mask.coords
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    mid, half = (lo + hi) / 2.0, CENTER_BOX_FRACTION * (hi - lo) / 2.0
    # whole millimetres keep the centers readable in truth files
    centers = tuple(
        tuple(float(v) for v in np.round(mid + half * np.array(signs)))
        for signs in itertools.product((-1, 1), repeat=3)
    )
    if not mask.contains(centers).all():
        raise SimulationError("default centers fall outside the mask; pass centers explicitly")
    sep = min(math.dist(a, b) for a, b in itertools.combinations(centers, 2))
    if sep < MIN_CENTER_SEPARATION:
        LGR.warning("default centers are only %.1f mm apart; detections may be ambiguous", sep)
    return centers


@dataclass(frozen=True)
class SimConfig:
    mask: BrainMask
    n_studies: int
    valid_fraction: float
    centers: tuple = None
    report_dist: dict = field(default_factory=lambda: dict(DEFAULT_REPORT_DIST))
    scatter_sd_mm: float = DEFAULT_SCATTER_SD
    n_participants: int = DEFAULT_PARTICIPANTS
    seed: int | None = None

    def __post_init__(self):
        centers = default_centers(self.mask) if self.centers is None else self.centers
        centers = tuple(tuple(float(v) for v in c) for c in centers)
        if len(centers) < 1 or any(len(c) != 3 for c in centers):
            raise ValueError("centers must be a list of 3D points")
        if not self.mask.contains(centers).all():
            raise ValueError("all centers must lie inside the mask")
        object.__setattr__(self, "centers", centers)
        dist = {int(k): float(v) for k, v in dict(self.report_dist).items()}
        if min(dist) < 0 or min(dist.values()) < 0:
            raise ValueError("report_dist must have nonnegative counts and probabilities")
        if abs(math.fsum(dist.values()) - 1.0) > 1e-9:
            raise ValueError("report_dist probabilities must sum to 1")
        object.__setattr__(self, "report_dist", dist)
        if not self.scatter_sd_mm >= 0:
            raise ValueError("scatter_sd_mm must be >= 0")
        if self.n_studies < 1:
            raise ValueError("n_studies must be >= 1")
        if not 0.0 <= self.valid_fraction <= 1.0:
            raise ValueError("valid_fraction must lie in [0, 1]")
        if self.n_participants < 1:
            raise ValueError("n_participants must be >= 1")

    @property
    def n_valid(self) -> int:
        ip = self.n_studies * self.valid_fraction
        n = int(math.floor(ip + 0.5))
        if abs(ip - n) > 1e-9:
            LGR.warning("I*p = %g is not an integer; using %d valid studies", ip, n)
        return n

    @property
    def r95(self) -> float:
        return r95(self.scatter_sd_mm)

    def to_dict(self) -> dict:
        return {
            "centers": [list(c) for c in self.centers],
            "report_dist": {str(k): v for k, v in sorted(self.report_dist.items())},
            "scatter_sd_mm": self.scatter_sd_mm,
            "n_participants": self.n_participants,
            "n_studies": self.n_studies,
            "valid_fraction": self.valid_fraction,
            "mask_sha256": self.mask.sha256,
            "seed": self.seed,
        }


def r95(scatter_sd_mm: float) -> float:
    """Radius holding 95% of an isotropic 3D Gaussian's mass."""
    from scipy.stats import chi2

    return float(scatter_sd_mm * math.sqrt(chi2.ppf(0.95, 3)))


def _draw_counts(cfg: SimConfig, rng: np.random.Generator, size) -> np.ndarray:
    values = np.array(sorted(cfg.report_dist), dtype=np.int64)
    probs = np.array([cfg.report_dist[k] for k in values])
    return values[rng.choice(values.size, size=size, p=probs)]


def _truncated_gaussian(centers: np.ndarray, sd: float, mask: BrainMask, rng) -> np.ndarray:
    """One draw per row of ``centers``; out-of-mask draws are redrawn."""
    out = centers + sd * rng.standard_normal(centers.shape)
    bad = np.flatnonzero(~mask.contains(out)) if len(out) else np.zeros(0, dtype=np.int64)
    tries = 1
    while bad.size:
        if tries >= MAX_REDRAWS:
            raise SimulationError(f"center too close to mask boundary: {tuple(centers[bad[0]])}")
        out[bad] = centers[bad] + sd * rng.standard_normal((bad.size, 3))
        bad = bad[~mask.contains(out[bad])]
        tries += 1
    return out


def _study(name: str, cls: str, cfg: SimConfig, foci) -> Study:
    # the name goes in the author column so the study survives a CSV round trip
    return Study(study_id(name, "", cls), cls, cfg.n_participants, foci, author=name)


def gen_valid_study(cfg: SimConfig, rng: np.random.Generator, name: str = "sim") -> Study:
    """Each center independently reports a random number of scattered foci."""
    counts = _draw_counts(cfg, rng, len(cfg.centers))
    centers = np.repeat(np.asarray(cfg.centers), counts, axis=0)
    xyz = _truncated_gaussian(centers, cfg.scatter_sd_mm, cfg.mask, rng)
    foci = tuple(Focus(*p) for p in xyz.tolist())
    return _study(name, VALID, cfg, foci)


def gen_noise_study(cfg: SimConfig, rng: np.random.Generator, name: str = "sim") -> Study:
    """Same focus-count law as a valid study, locations uniform over in-mask voxel centers."""
    n = int(_draw_counts(cfg, rng, len(cfg.centers)).sum())
    pos = rng.integers(cfg.mask.n_in_mask, size=n)
    foci = tuple(Focus(*p) for p in cfg.mask.coords[pos].tolist())
    return _study(name, NOISE, cfg, foci)


def gen_dataset(cfg: SimConfig, rng: np.random.Generator) -> FociDataset:
    """round(I p) valid studies followed by noise studies; labels carry the class."""
    n_valid = cfg.n_valid
    width = len(str(cfg.n_studies))
    studies = []
    for i in range(cfg.n_studies):
        sid = f"sim{i + 1:0{width}d}"
        gen = gen_valid_study if i < n_valid else gen_noise_study
        studies.append(gen(cfg, rng, sid))
    return FociDataset(tuple(studies), atlas_tag="Unspecified")


def truth_record(cfg: SimConfig, dataset: FociDataset) -> dict:
    """Ground truth for a simulated dataset: centers, classes and generator settings."""
    return {
        "config": cfg.to_dict(),
        "r95_mm": cfg.r95,
        "studies": [{"id": s.id, "class": s.label, "n_foci": len(s.foci)} for s in dataset.studies],
    }
