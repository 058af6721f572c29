"""Null distributions and thresholding.

Two kinds of null are supported:

* :class:`EmpiricalMaxNull` -- a Monte Carlo sample of the image maximum (or
  of the largest cluster) obtained by relocating every focus uniformly over the
  mask, used for familywise error control.
* :class:`ExactHistogramNull` -- the voxel-wise null of the statistic when each
  study map is sampled at an independent uniformly drawn voxel. It is computed
  by folding per-study value histograms one study at a time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

from .data import BrainMask, FociDataset, Focus, StatImage, Study, VolumeGrid
from .kernels import KernelSpec, StudyMap, study_map
from .statistics import StudyWeights, config_key, statistic_from_maps

LGR = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 1e-5
# Values are binned with floor((x - lo) / h + BIN_TOL) so that a statistic and
# the null atom it corresponds to land in the same bin despite rounding.
BIN_TOL = 1e-6
# Relative mass below which folded bins are treated as FFT round-off.
NOISE_FLOOR = 1e-14
TAIL_EPS = 1e-15
# Internal lattice spacing is bin_width / refine for continuous kernels, with
# refine between these bounds (finer for few studies, see _auto_refine).
LATTICE_REFINE = 4
MAX_REFINE = 16
# A folded lattice bin is trusted when it holds at least this fraction of the
# largest bin; tilted passes extend the trusted range into the upper tail.
RELIABLE = 1e-10
MAX_TILTS = 8

MC_STREAM = 1


class NullMismatch(ValueError):
    """A null distribution was built for a different configuration or method."""


# --------------------------------------------------------------------------
# Null distribution types


@dataclass(eq=False)
class EmpiricalMaxNull:
    samples: np.ndarray
    statistic: str = "max"
    config_key: str | None = None
    seed: int | None = None
    method: str | None = None

    def __post_init__(self):
        self.samples = np.sort(np.asarray(self.samples, dtype=float))
        if self.samples.size < 1:
            raise ValueError("empirical null needs at least one sample")

    @property
    def n_iter(self) -> int:
        return int(self.samples.size)

    def count_at_least(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return self.n_iter - np.searchsorted(self.samples, values, side="left")

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.samples, q, method="inverted_cdf"))


@dataclass(eq=False)
class ExactHistogramNull:
    """Null probabilities on uniform bins ``[lo + k h, lo + (k+1) h)``."""

    bin_width: float
    probs: np.ndarray
    support_min: float
    method: str

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0):
            raise ValueError("null probabilities must be nonnegative")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"null probabilities sum to {total}, not 1")
        sf = np.cumsum(self.probs[::-1])[::-1]
        sf /= sf[0]
        self._sf = np.minimum(sf, 1.0)

    @property
    def n_bins(self) -> int:
        return self.probs.size

    def bin_of(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return np.floor((values - self.support_min) / self.bin_width + BIN_TOL).astype(np.int64)

    def sf(self, values) -> np.ndarray:
        """P(null >= value), counting the value's own bin."""
        k = self.bin_of(values)
        out = np.zeros(k.shape)
        inside = (k >= 0) & (k < self.n_bins)
        out[k < 0] = 1.0
        out[inside] = self._sf[k[inside]]
        return out

    def cdf_at_edges(self) -> np.ndarray:
        """P(null < lo + k h) for k = 0 .. n_bins."""
        return np.r_[0.0, np.cumsum(self.probs)]

    def forming_bin(self, p_threshold: float) -> int:
        """First bin whose survival probability is below ``p_threshold``."""
        below = np.flatnonzero(self._sf < p_threshold)
        return int(below[0]) if below.size else self.n_bins

    def support_max(self) -> float:
        nz = np.flatnonzero(self.probs)
        return self.support_min + (nz[-1] + 1) * self.bin_width


# --------------------------------------------------------------------------
# Histogram folding


@dataclass
class _Binned:
    """Distribution over integer bins ``offset + j`` carrying mass and first moment."""

    offset: int
    mass: np.ndarray
    m1: np.ndarray

    def trim(self, tail_eps=TAIL_EPS):
        nz = np.flatnonzero(self.mass)
        if nz.size == 0:
            raise ValueError("empty distribution")
        a, b = nz[0], nz[-1] + 1
        mass, m1 = self.mass[a:b], self.m1[a:b]
        offset = self.offset + a
        total = mass.sum()
        # lump negligible tails into the outermost kept bin at that bin's mean
        if tail_eps > 0 and mass.size > 2:
            t = tail_eps * total
            lo = int(np.searchsorted(np.cumsum(mass), t, side="right"))
            hi = mass.size - int(np.searchsorted(np.cumsum(mass[::-1]), t, side="right"))
            if (lo > 0 or hi < mass.size) and lo < hi:
                mass, m1 = mass.copy(), m1.copy()
                if lo > 0:
                    mean = m1[lo] / mass[lo]
                    mass[lo] += mass[:lo].sum()
                    m1[lo] = mass[lo] * mean
                if hi < mass.size:
                    mean = m1[hi - 1] / mass[hi - 1]
                    mass[hi - 1] += mass[hi:].sum()
                    m1[hi - 1] = mass[hi - 1] * mean
                mass, m1 = mass[lo:hi], m1[lo:hi]
                offset += lo
        return _Binned(offset, mass, m1)


def _bin_values(x, h):
    return np.floor(x / h + BIN_TOL).astype(np.int64)


def _component(values, n_zero: int, n_total: int, h: float) -> _Binned:
    """Histogram of a study's additive contributions at a uniform random voxel."""
    values = np.asarray(values, dtype=float)
    k = _bin_values(values, h) if values.size else np.zeros(0, dtype=np.int64)
    lo = min(int(k.min()) if k.size else 0, 0)
    hi = max(int(k.max()) if k.size else 0, 0)
    mass = np.bincount(k - lo, minlength=hi - lo + 1).astype(float)
    m1 = np.bincount(k - lo, weights=values, minlength=hi - lo + 1)
    mass[-lo] += n_zero
    return _Binned(lo, mass / n_total, m1 / n_total)


def _fold_moments(acc: _Binned, comp: _Binned):
    """Convolve mass and first-moment arrays; returns (mass, m1, used_fft)."""
    nz = np.flatnonzero(comp.mass)
    n = acc.mass.size + comp.mass.size - 1
    if nz.size <= 8:
        mass, m1 = np.zeros(n), np.zeros(n)
        for j in nz:
            sl = slice(j, j + acc.mass.size)
            mass[sl] += comp.mass[j] * acc.mass
            m1[sl] += comp.mass[j] * acc.m1 + comp.m1[j] * acc.mass
        return mass, m1, False
    size = sp_fft.next_fast_len(n, real=True)
    fa, fa1 = sp_fft.rfft(acc.mass, size), sp_fft.rfft(acc.m1, size)
    fb, fb1 = sp_fft.rfft(comp.mass, size), sp_fft.rfft(comp.m1, size)
    mass = sp_fft.irfft(fa * fb, size)[:n]
    m1 = sp_fft.irfft(fa1 * fb + fa * fb1, size)[:n]
    return mass, m1, True


def _fold(acc: _Binned, comp: _Binned, h: float) -> _Binned:
    mass, m1, noisy = _fold_moments(acc, comp)
    offset = acc.offset + comp.offset
    if noisy:
        floor = NOISE_FLOOR * mass.max()
        dead = mass <= floor
        mass[dead] = 0.0
        m1[dead] = 0.0
        z = mass.sum()
        mass /= z
        m1 /= z
    # a + b with a in bin i, b in bin j lies in bin i+j or i+j+1; re-bin by mean
    k = offset + np.arange(mass.size)
    live = mass > 0
    mean = np.where(live, m1 / np.where(live, mass, 1.0), k * h)
    mean = np.clip(mean, k * h, (k + 2) * h)
    target = np.clip(_bin_values(mean, h), k, k + 1) - offset
    new_mass = np.bincount(target, weights=mass, minlength=mass.size + 1)
    new_m1 = np.bincount(target, weights=mass * mean, minlength=mass.size + 1)
    return _Binned(offset, new_mass, new_m1).trim()


def fold_components(components, h: float) -> _Binned:
    acc = None
    for comp in components:
        acc = comp.trim(0.0) if acc is None else _fold(acc, comp, h)
    return acc


def _to_histogram(dist: _Binned, h: float, lo: float, hi: float, method: str) -> ExactHistogramNull:
    live = dist.mass > 0
    stat = dist.m1[live] / dist.mass[live]
    n_bins = int(math.floor((hi - lo) / h + BIN_TOL)) + 1
    k = np.clip(np.floor((stat - lo) / h + BIN_TOL).astype(np.int64), 0, n_bins - 1)
    probs = np.bincount(k, weights=dist.mass[live], minlength=n_bins)
    probs /= probs.sum()
    return ExactHistogramNull(h, probs, lo, method)


# Continuous contributions (ALE, SDM) are spread linearly onto the lattice
# points k*h, which preserves each value's mean; sums of lattice variables stay
# on the lattice, so folding is a plain convolution.


def _lattice_component(values, n_zero: int, n_total: int, h: float):
    y = np.asarray(values, dtype=float) / h
    k = np.floor(y).astype(np.int64)
    f = y - k
    lo = min(int(k.min()) if k.size else 0, 0)
    hi = max(int(k.max()) + 1 if k.size else 0, 0)
    n = hi - lo + 1
    mass = np.bincount(k - lo, weights=1.0 - f, minlength=n)
    mass += np.bincount(k + 1 - lo, weights=f, minlength=n)[:n]
    mass[-lo] += n_zero
    return _trim_lattice(lo, mass / n_total, 0.0)


def _trim_lattice(offset: int, mass: np.ndarray, tail_eps=TAIL_EPS):
    nz = np.flatnonzero(mass)
    if nz.size == 0:
        raise ValueError("empty distribution")
    mass = mass[nz[0] : nz[-1] + 1]
    offset += int(nz[0])
    if tail_eps > 0 and mass.size > 2:
        t = tail_eps * mass.sum()
        lo = int(np.searchsorted(np.cumsum(mass), t, side="right"))
        hi = mass.size - int(np.searchsorted(np.cumsum(mass[::-1]), t, side="right"))
        if (lo > 0 or hi < mass.size) and lo < hi:
            mass = mass.copy()
            mass[lo] += mass[:lo].sum()
            mass[hi - 1] += mass[hi:].sum()
            mass = mass[lo:hi]
            offset += lo
    return offset, mass


def _fold_lattice(acc, comp):
    (oa, a), (ob, b) = acc, comp
    n = a.size + b.size - 1
    if np.count_nonzero(a) < np.count_nonzero(b):
        (oa, a), (ob, b) = (ob, b), (oa, a)
    nz = np.flatnonzero(b)
    if nz.size <= 8:
        # few atoms: shift-and-add is exact and linear in the array length
        out = np.zeros(n)
        for j in nz:
            out[j : j + a.size] += b[j] * a
    elif min(a.size, b.size) < 64:
        out = np.convolve(a, b)
    else:
        size = sp_fft.next_fast_len(n, real=True)
        out = sp_fft.irfft(sp_fft.rfft(a, size) * sp_fft.rfft(b, size), size)[:n]
        out[out <= NOISE_FLOOR * out.max()] = 0.0
        out /= out.sum()
    return _trim_lattice(oa + ob, out)


def _lattice_to_histogram(offset, mass, h, transform, lo, hi, method, zero_atom=0.0,
                          bounds=None, refine=1) -> ExactHistogramNull:
    """Spread each lattice mass uniformly over +-h/2 and bin through ``transform``.

    The lattice spacing is ``h / refine`` while output bins have width ``h``.
    ``zero_atom`` is the probability that every study contributes exactly 0;
    it is removed from the lattice point at 0 and binned as a point mass.
    ``bounds`` is the true support of the summed variable; spreading never
    moves mass outside it.
    """
    n_bins = int(math.floor((hi - lo) / h + BIN_TOL)) + 1
    g = h / refine
    mass = mass.copy()
    take = 0.0
    if zero_atom > 0 and offset <= 0 < offset + mass.size:
        take = min(zero_atom, mass[-offset])
        mass[-offset] -= take
    k = offset + np.arange(mass.size)
    left, right = (k - 0.5) * g, (k + 0.5) * g
    if bounds is not None:
        left = np.clip(left, *bounds)
        right = np.clip(right, *bounds)
    a = np.clip((transform(left) - lo) / h, 0.0, n_bins - 1e-9)
    b = np.clip((transform(right) - lo) / h, 0.0, n_bins - 1e-9)
    ja = np.floor(a).astype(np.int64)
    width = b - a
    # with transform slopes <= 1 an interval touches at most two bins
    split = np.minimum(ja + 1, b) - a
    frac = np.where(width > 0, split / np.where(width > 0, width, 1.0), 1.0)
    probs = np.bincount(ja, weights=mass * frac, minlength=n_bins)
    jb = np.minimum(ja + 1, n_bins - 1)
    probs += np.bincount(jb, weights=mass * (1.0 - frac), minlength=n_bins)
    probs = probs[:n_bins]
    if take:
        probs[int(np.floor((transform(0.0) - lo) / h + BIN_TOL))] += take
    probs /= probs.sum()
    return ExactHistogramNull(h, probs, lo, method)


def _auto_refine(n_studies: int) -> int:
    # with few studies the null is a set of isolated atoms, and a coarse lattice
    # smears atoms that sit near a bin edge into the neighbouring bin
    return int(np.clip(80 // max(n_studies, 1), LATTICE_REFINE, MAX_REFINE))


def _tilt(comp, theta):
    """Component reweighted by exp(theta k) and renormalized; returns (comp, log normalizer)."""
    o, m = comp
    with np.errstate(divide="ignore"):
        lw = np.log(m) + theta * (o + np.arange(m.size))
    c = float(lw.max())
    t = np.exp(lw - c)
    s = float(t.sum())
    return (o, t / s), c + math.log(s)


def _fold_pass(comps, theta=0.0):
    """Fold lattice components under tilt ``theta``.

    Returns (offset, T, log_scale): the untilted probability of lattice point
    ``offset + j`` is ``T[j] * exp(log_scale - theta * (offset + j))``.
    """
    acc, log_scale = None, 0.0
    for comp in comps:
        if theta:
            comp, c = _tilt(comp, theta)
            log_scale += c
        acc = comp if acc is None else _fold_lattice(acc, comp)
    return acc[0], acc[1], log_scale


def _theta_for_mean(comps, target: float) -> float | None:
    """Tilt whose summed tilted mean sits at lattice index ``target`` (None if out of reach)."""
    top = sum(o + m.size - 1 for o, m in comps)
    if target >= top:
        return None

    def excess(theta):
        total = 0.0
        for comp in comps:
            (o, t), _ = _tilt(comp, theta)
            total += o + float(np.dot(t, np.arange(t.size)))
        return total - target

    if excess(0.0) >= 0:
        return 0.0
    hi = 1.0
    while excess(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            return None
    from scipy.optimize import brentq

    return float(brentq(excess, hi / 2.0 if hi > 1 else 0.0, hi, xtol=1e-12 * hi))


def _reliable_top(T) -> int:
    """Index of the last bin (excluding the lumped edge) above the reliability bound."""
    ok = np.flatnonzero(T[:-1] >= RELIABLE * T.max())
    return int(ok[-1]) if ok.size else 0


def _fold_with_tail(comps, tail_index: float | None):
    """Plain fold, plus tilted folds until the trusted range reaches ``tail_index``.

    Every pass estimates the same lattice distribution; each lattice point
    takes its value from the pass in which it is most reliable (largest
    relative to that pass's peak). The first and last bin of a tilted pass
    hold lumped tail mass and are never used.
    """
    passes = [(*_fold_pass(comps), 0.0)]
    if tail_index is not None:
        for _ in range(MAX_TILTS):
            o, T, _, _ = passes[-1]
            reached = o + _reliable_top(T)
            if reached >= tail_index:
                break
            theta = _theta_for_mean(comps, reached)
            if theta is None or theta <= passes[-1][3]:
                break
            passes.append((*_fold_pass(comps, theta), theta))
    if len(passes) == 1:
        return passes[0][0], passes[0][1]
    lo = min(p[0] for p in passes)
    hi = max(p[0] + p[1].size for p in passes)
    best = np.full(hi - lo, -np.inf)
    log_p = np.full(hi - lo, -np.inf)
    for j, (o, T, log_scale, theta) in enumerate(passes):
        with np.errstate(divide="ignore"):
            rel = np.log(T) - math.log(T.max())
            val = np.log(T) + log_scale - theta * (o + np.arange(T.size))
        if j > 0:
            rel[[0, -1]] = -np.inf
        sl = slice(o - lo, o - lo + T.size)
        take = rel > best[sl]
        best[sl] = np.where(take, rel, best[sl])
        log_p[sl] = np.where(take, val, log_p[sl])
    mass = np.exp(log_p)
    return lo, mass / mass.sum()


def _fold_continuous(values_iter, h, refine, tail_value=None, inverse=None):
    """Fold lattice components; returns (offset, mass, zero_atom, bounds).

    ``tail_value`` (in the summed variable's units, mapped by ``inverse``) is
    the largest value whose upper-tail probability must be accurate.
    """
    g = h / refine
    comps = []
    zero_atom, lo, hi = 1.0, 0.0, 0.0
    for x, n_zero, V in values_iter:
        zero_atom *= n_zero / V
        if x.size:
            lo += min(float(x.min()), 0.0) if n_zero else float(x.min())
            hi += max(float(x.max()), 0.0) if n_zero else float(x.max())
        comps.append(_lattice_component(x, n_zero, V, g))
    if not comps:
        raise ValueError("no study maps")
    tail_index = None
    if tail_value is not None:
        tail_index = (inverse(tail_value) if inverse else tail_value) / g + refine
    offset, mass = _fold_with_tail(comps, tail_index)
    return offset, mass, zero_atom, (lo, hi)


def _direct_histogram(values, n_zero, n_total, h, lo, hi, method) -> ExactHistogramNull:
    """Null of a single study: its value histogram over the mask."""
    n_bins = int(math.floor((hi - lo) / h + BIN_TOL)) + 1
    k = np.clip(np.floor((np.asarray(values) - lo) / h + BIN_TOL).astype(np.int64), 0, n_bins - 1)
    probs = np.bincount(k, minlength=n_bins).astype(float)
    probs[int(math.floor(-lo / h + BIN_TOL))] += n_zero
    return ExactHistogramNull(h, probs / n_total, lo, method)


def ale_exact_null(maps, mask: BrainMask, bin_width: float = DEFAULT_BIN_WIDTH,
                   refine: int | None = None, tail_to: float | None = None) -> ExactHistogramNull:
    """Exact voxel-wise null of the ALE statistic (up to binning).

    Each study map is sampled at an independent uniform in-mask voxel. Working
    with u = -log(1 - L), the union 1 - prod(1 - L_i) becomes 1 - exp(-sum u_i),
    so studies fold in by convolution of their u-histograms.

    Parameters
    ----------
    refine : int, optional
        Lattice points per output bin; chosen from the number of studies by default.
    tail_to : float, optional
        Largest statistic value whose p-value must keep relative accuracy
        (typically the observed maximum). Without it, FFT round-off limits
        the resolved tail to roughly 1e-10 of the densest bin and smaller
        p-values may be underestimated or reported as 0.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    V = mask.n_in_mask
    maps = list(maps)
    for m in maps:
        if m.method != "ALE":
            raise NullMismatch("ale_exact_null needs ALE study maps")
    if len(maps) == 1:
        # same arithmetic as the statistic, so every value lands in its own bin
        m = maps[0]
        return _direct_histogram(-np.expm1(np.log1p(-m.values)), V - m.positions.size, V,
                                 bin_width, 0.0, 1.0, "ALE")
    refine = refine or _auto_refine(len(maps))
    parts = ((-np.log1p(-m.values), V - m.positions.size, V) for m in maps)
    offset, mass, zero_atom, bounds = _fold_continuous(parts, bin_width, refine, tail_to,
                                                       lambda a: -math.log1p(-min(a, 1.0 - 1e-16)))
    return _lattice_to_histogram(offset, mass, bin_width, lambda u: -np.expm1(-u), 0.0, 1.0, "ALE",
                                 zero_atom, bounds, refine)


def linear_exact_null(
    maps, weights: StudyWeights, mask: BrainMask, method: str, bin_width: float = DEFAULT_BIN_WIDTH,
    refine: int | None = None, tail_to: float | None = None,
) -> ExactHistogramNull:
    """Exact voxel-wise null of a weighted mean of study maps (MKDA or SDM).

    MKDA study maps take two values, so the null is a set of atoms; bins carry
    their exact mean so an observed statistic sitting on an atom always counts
    the atom, and the folds are direct sums with no round-off floor. SDM
    values are continuous and use the lattice spreading; ``refine`` and
    ``tail_to`` act as in :func:`ale_exact_null`.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    V = mask.n_in_mask
    total = weights.total
    lo = 0.0 if method == "MKDA" else -1.0
    maps = list(maps)
    if len(maps) != len(weights):
        raise ValueError(f"{len(weights)} weights for {len(maps)} study maps")
    for m in maps:
        if m.method != method:
            raise NullMismatch(f"expected {method} study maps, got {m.method}")
    if not maps:
        raise ValueError("no study maps")
    scaled = [(weights.values[i] * m.values / total, V - m.positions.size, V) for i, m in enumerate(maps)]
    if method == "MKDA":
        acc = None
        for x, n_zero, _ in scaled:
            comp = _component(x, n_zero, V, bin_width)
            acc = comp.trim(0.0) if acc is None else _fold(acc, comp, bin_width)
        return _to_histogram(acc, bin_width, lo, 1.0, method)
    if len(scaled) == 1:
        return _direct_histogram(*scaled[0], bin_width, lo, 1.0, method)
    refine = refine or _auto_refine(len(maps))
    offset, mass, zero_atom, bounds = _fold_continuous(iter(scaled), bin_width, refine, tail_to)
    return _lattice_to_histogram(offset, mass, bin_width, lambda x: x, lo, 1.0, method,
                                 zero_atom, bounds, refine)


def exact_null(maps, method: str, mask: BrainMask, weights: StudyWeights | None = None,
               bin_width: float = DEFAULT_BIN_WIDTH, tail_to: float | None = None) -> ExactHistogramNull:
    if method == "ALE":
        return ale_exact_null(maps, mask, bin_width, tail_to=tail_to)
    maps = list(maps)
    return linear_exact_null(maps, weights or StudyWeights.uniform(len(maps)), mask, method, bin_width,
                             tail_to=tail_to)


def mc_voxel_null(maps, method: str, mask: BrainMask, n_draws: int, seed: int,
                  weights: StudyWeights | None = None, bin_width: float = DEFAULT_BIN_WIDTH,
                  chunk: int = 100_000) -> ExactHistogramNull:
    """Monte Carlo estimate of the voxel-wise null, binned like the exact one.

    Each draw samples every study map at an independent uniform in-mask voxel.
    """
    maps = list(maps)
    V = mask.n_in_mask
    dense = [m.dense() for m in maps]
    if method != "ALE":
        weights = weights or StudyWeights.uniform(len(maps))
    lo = 0.0 if method in ("ALE", "MKDA") else -1.0
    n_bins = int(math.floor((1.0 - lo) / bin_width + BIN_TOL)) + 1
    counts = np.zeros(n_bins)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        acc = np.zeros(n)
        for i, d in enumerate(dense):
            x = d[rng.integers(V, size=n)]
            if method == "ALE":
                acc += np.log1p(-x)
            else:
                acc += weights.values[i] * x
        stat = -np.expm1(acc) if method == "ALE" else acc / weights.total
        k = np.clip(np.floor((stat - lo) / bin_width + BIN_TOL).astype(np.int64), 0, n_bins - 1)
        counts += np.bincount(k, minlength=n_bins)
        done += n
    return ExactHistogramNull(bin_width, counts / counts.sum(), lo, method)


# --------------------------------------------------------------------------
# Monte Carlo null of the maximum


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for one (seed, key...) cell."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def relocate(dataset: FociDataset, mask: BrainMask, seed: int, replicate: int) -> FociDataset:
    """Copy of ``dataset`` with every focus moved to a uniform in-mask voxel center.

    Focus counts, participant counts and focus signs are kept.
    """
    V = mask.n_in_mask
    coords = mask.coords
    studies = []
    for i, s in enumerate(dataset.studies):
        if s.foci:
            pos = stream(seed, MC_STREAM, replicate, i).integers(V, size=len(s.foci))
            foci = tuple(Focus(*coords[p], t_value=f.t_value) for p, f in zip(pos, s.foci))
        else:
            foci = ()
        studies.append(Study(s.id, s.label, s.n_participants, foci, s.author, s.year))
    return FociDataset(studies, dataset.atlas_tag)


def _max_cluster(mark: np.ndarray, mask: BrainMask, connectivity: int) -> int:
    if not mark.any():
        return 0
    labels, n = ndimage.label(mask.to_volume(mark), structure=_structure(connectivity))
    return int(np.bincount(labels.ravel())[1:].max())


def _replicate_chunk(dataset, kernel, weights, mask, seed, replicates, assume_positive,
                     forming, connectivity):
    maxima = np.zeros(len(replicates))
    sizes = np.zeros(len(replicates))
    for j, r in enumerate(replicates):
        null_data = relocate(dataset, mask, seed, r)
        maps = [study_map(s, kernel, mask, assume_positive) for s in null_data.studies]
        stat = statistic_from_maps(maps, kernel.method, weights, mask)
        maxima[j] = stat.values.max() if stat.values.size else 0.0
        if forming is not None:
            hist, k = forming
            sizes[j] = _max_cluster(hist.bin_of(stat.values) >= k, mask, connectivity)
    return maxima, sizes


@dataclass(eq=False)
class MonteCarloNulls:
    max_stat: EmpiricalMaxNull
    max_cluster: EmpiricalMaxNull | None = None


def null_fingerprint(dataset, kernel, weights, mask, n_iter, seed, extra=None) -> dict:
    return {
        "config_key": config_key(dataset, kernel, weights, mask),
        "dataset": dataset.sha256(),
        "kernel": kernel.to_dict(),
        "weights": None if weights is None else list(weights.values),
        "mask": mask.sha256,
        "n_iter": int(n_iter),
        "seed": int(seed),
        **(extra or {}),
    }


def fingerprint_hash(fp: dict) -> str:
    return hashlib.sha256(json.dumps(fp, sort_keys=True).encode()).hexdigest()


def mc_nulls(
    dataset: FociDataset,
    kernel: KernelSpec,
    mask: BrainMask,
    n_iter: int,
    seed: int,
    weights: StudyWeights | None = None,
    assume_positive: bool = False,
    cluster_forming: tuple[ExactHistogramNull, float] | None = None,
    connectivity: int = 26,
    n_jobs: int = 1,
) -> MonteCarloNulls:
    """Monte Carlo nulls of the image maximum and, optionally, the largest cluster.

    ``cluster_forming`` is ``(voxel_null, p)``: a replicate's voxels count as
    suprathreshold when their uncorrected p under ``voxel_null`` is below p.
    Replicate ``r`` draws study ``i``'s foci from stream ``(seed, r, i)``, so
    the result does not depend on ``n_jobs``.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if kernel.method == "ALE":
        weights = None
    elif weights is None:
        from .statistics import weights_from_participants

        weights = weights_from_participants(dataset, 1.0)
    forming = None
    if cluster_forming is not None:
        hist, p = cluster_forming
        forming = (hist, hist.forming_bin(p))

    if dataset.n_foci == 0:
        maxima, sizes = np.zeros(n_iter), np.zeros(n_iter)
    else:
        args = (dataset, kernel, weights, mask, seed)
        tail = (assume_positive, forming, connectivity)
        if n_jobs == 1:
            maxima, sizes = _replicate_chunk(*args, list(range(n_iter)), *tail)
        else:
            from joblib import Parallel, delayed

            chunks = np.array_split(np.arange(n_iter), max(1, min(n_iter, 4 * abs(n_jobs))))
            parts = Parallel(n_jobs=n_jobs)(
                delayed(_replicate_chunk)(*args, c.tolist(), *tail) for c in chunks if c.size
            )
            maxima = np.concatenate([p[0] for p in parts])
            sizes = np.concatenate([p[1] for p in parts])

    key = config_key(dataset, kernel, weights, mask)
    out = MonteCarloNulls(EmpiricalMaxNull(maxima, "max", key, seed, kernel.method))
    if forming is not None:
        out.max_cluster = EmpiricalMaxNull(sizes, "cluster_size", key, seed, kernel.method)
    return out


def mc_null_max(dataset, kernel, mask, n_iter, seed, weights=None, assume_positive=False, n_jobs=1):
    """Monte Carlo sample of the maximal statistic under random focus placement."""
    return mc_nulls(dataset, kernel, mask, n_iter, seed, weights, assume_positive, n_jobs=n_jobs).max_stat


# --------------------------------------------------------------------------
# Thresholding


@dataclass
class Cluster:
    voxels: np.ndarray  # (n, 3) voxel indices
    size: int
    peak_value: float
    peak_xyz: tuple[float, float, float]
    p_corrected: float | None = None

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "peak_value": self.peak_value,
            "peak_x": self.peak_xyz[0],
            "peak_y": self.peak_xyz[1],
            "peak_z": self.peak_xyz[2],
            "p_corrected": self.p_corrected,
        }


@dataclass(eq=False)
class ThresholdResult:
    """Outcome of a thresholding procedure; vectors are over mask positions."""

    mask: BrainMask
    sig: np.ndarray
    p_uncorrected: np.ndarray
    p_corrected: np.ndarray
    procedure: dict
    clusters: list[Cluster] = field(default_factory=list)

    @property
    def sig_grid(self) -> VolumeGrid:
        return self.mask.to_grid(self.sig)

    @property
    def p_uncorrected_grid(self) -> VolumeGrid:
        return self.mask.to_grid(self.p_uncorrected, fill=1.0)

    @property
    def p_corrected_grid(self) -> VolumeGrid:
        return self.mask.to_grid(self.p_corrected, fill=1.0)

    @property
    def n_sig(self) -> int:
        return int(self.sig.sum())


def _as_vector(values, mask: BrainMask) -> np.ndarray:
    if isinstance(values, VolumeGrid):
        return mask.from_grid(values).astype(float)
    if isinstance(values, StatImage):
        return values.values
    values = np.asarray(values, dtype=float)
    if values.shape != (mask.n_in_mask,):
        raise ValueError("expected a vector over in-mask voxels")
    return values


def p_uncorrected(stat: StatImage, null: ExactHistogramNull) -> np.ndarray:
    """Right-tail p-values of a statistic image under a voxel-wise null."""
    if not isinstance(null, ExactHistogramNull):
        raise NullMismatch("uncorrected p-values need a voxel-wise (histogram) null; "
                           "use fwe_threshold with a max-statistic null")
    if null.method != stat.method:
        raise NullMismatch(f"{null.method} null cannot be applied to a {stat.method} statistic")
    return null.sf(stat.values)


def bh_adjust(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg adjusted p-values and the ascending sort order (ties by index)."""
    n = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * n / np.arange(1, n + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(ranked[::-1])[::-1], 1.0)
    adj = np.empty(n)
    adj[order] = adj_sorted
    return adj, order


def fdr_threshold(p, mask: BrainMask, alpha: float = 0.05, stat: StatImage | None = None,
                  connectivity: int = 26) -> ThresholdResult:
    """Benjamini-Hochberg step-up over the in-mask p-values."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    p = _as_vector(p, mask)
    n = p.size
    adj, order = bh_adjust(p)
    crit = np.arange(1, n + 1) * alpha / n
    passing = np.flatnonzero(p[order] <= crit)
    sig = np.zeros(n, dtype=bool)
    if passing.size:
        sig = p <= p[order[passing[-1]]]
    clusters = _clusters(sig, mask, stat, connectivity)
    return ThresholdResult(mask, sig, p, adj, {"procedure": "FDR", "alpha": alpha}, clusters)


def fwe_threshold(stat: StatImage, null: EmpiricalMaxNull, alpha: float = 0.05,
                  connectivity: int = 26) -> ThresholdResult:
    """Voxel-wise FWE control with the add-one corrected max-statistic p-value."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if not isinstance(null, EmpiricalMaxNull) or null.statistic != "max":
        raise NullMismatch("fwe_threshold needs a max-statistic Monte Carlo null")
    if null.config_key and stat.config_key and null.config_key != stat.config_key:
        raise NullMismatch("null distribution was built for a different dataset/kernel/weights/mask")
    if null.method and null.method != stat.method:
        raise NullMismatch(f"{null.method} null cannot be applied to a {stat.method} statistic")
    p = (1.0 + null.count_at_least(stat.values)) / (1.0 + null.n_iter)
    sig = p <= alpha
    clusters = _clusters(sig, stat.mask, stat, connectivity)
    return ThresholdResult(stat.mask, sig, np.full(p.size, np.nan), p,
                           {"procedure": "FWEvoxel", "alpha": alpha, "n_iter": null.n_iter}, clusters)


def fixed_threshold(p, mask: BrainMask, cut: float = 0.001, stat: StatImage | None = None,
                    connectivity: int = 26) -> ThresholdResult:
    """Significant where p < cut."""
    if not 0 < cut < 1:
        raise ValueError("cut must be in (0, 1)")
    p = _as_vector(p, mask)
    sig = p < cut
    clusters = _clusters(sig, mask, stat, connectivity)
    return ThresholdResult(mask, sig, p, p.copy(), {"procedure": "Fixed", "p": cut}, clusters)


def _structure(connectivity: int):
    rank = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if rank is None:
        raise ValueError("connectivity must be 6, 18 or 26")
    return ndimage.generate_binary_structure(3, rank)


def cluster_label(sig, connectivity: int = 26, mask: BrainMask | None = None,
                  stat: StatImage | None = None) -> list[Cluster]:
    """Connected components of the true voxels, largest first.

    ``sig`` is a boolean :class:`VolumeGrid`, or a vector over ``mask``.
    """
    if isinstance(sig, VolumeGrid):
        vol = np.asarray(sig.data, dtype=bool)
        grid = sig
    else:
        if mask is None:
            raise ValueError("a mask is needed for vector input")
        vol = mask.to_volume(np.asarray(sig, dtype=bool))
        grid = mask.grid
    labels, n = ndimage.label(vol, structure=_structure(connectivity))
    if n == 0:
        return []
    values = None
    if stat is not None:
        values = stat.mask.to_volume(stat.values).ravel()
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
    ends = np.r_[starts[1:], idx.size]
    clusters = []
    for a, b in zip(starts, ends):
        members = idx[a:b]
        if values is not None:
            peak = members[int(np.argmax(values[members]))]
            peak_value = float(values[peak])
        else:
            peak, peak_value = members[0], float("nan")
        ijk = np.column_stack(np.unravel_index(members, grid.dims))
        xyz = tuple(float(v) for v in grid.voxel_to_world(np.unravel_index(peak, grid.dims)))
        clusters.append(Cluster(ijk, int(members.size), peak_value, xyz))
    clusters.sort(key=lambda c: (-c.size, tuple(c.voxels[0])))
    return clusters


def _clusters(sig, mask, stat, connectivity):
    return cluster_label(sig, connectivity, mask=mask, stat=stat)


def cluster_fwe(stat: StatImage, p_unc, forming_p: float, null_sizes: EmpiricalMaxNull,
                alpha: float = 0.05, connectivity: int = 26) -> ThresholdResult:
    """Cluster-extent FWE: keep clusters strictly larger than the null (1 - alpha) quantile."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if null_sizes.statistic != "cluster_size":
        raise NullMismatch("cluster_fwe needs a null of maximal cluster sizes")
    if null_sizes.config_key and stat.config_key and null_sizes.config_key != stat.config_key:
        raise NullMismatch("cluster-size null was built for a different configuration")
    mask = stat.mask
    p = _as_vector(p_unc, mask)
    forming = p < forming_p
    critical = null_sizes.quantile(1.0 - alpha)
    clusters = cluster_label(forming, connectivity, mask=mask, stat=stat)
    sig = np.zeros(mask.n_in_mask, dtype=bool)
    p_corr = np.ones(mask.n_in_mask)
    kept = []
    pos = mask.position
    for c in clusters:
        c.p_corrected = float((1 + null_sizes.count_at_least(c.size)) / (1 + null_sizes.n_iter))
        members = pos[c.voxels[:, 0], c.voxels[:, 1], c.voxels[:, 2]]
        p_corr[members] = c.p_corrected
        if c.size > critical:
            sig[members] = True
            kept.append(c)
    procedure = {"procedure": "FWEcluster", "alpha": alpha, "forming_p": forming_p,
                 "critical_size": critical, "n_iter": null_sizes.n_iter}
    return ThresholdResult(mask, sig, p, p_corr, procedure, kept)
