"""Replicated simulate-analyze-threshold runs over an (I, p) grid.

Four power measures are recorded per cell: the probability that at least one
population center is detected, the probability that all are, the mean number
detected, and the mean voxel-wise true positive rate.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import BrainMask
from .inference import ThresholdResult, stream
from .io import atomic_write_text
from .kernels import KernelSpec
from .pipeline import InferenceSpec, analyze
from .simulation import SimConfig, gen_dataset

LGR = logging.getLogger(__name__)

SIM_STREAM = 2
INFERENCE_STREAM = 3
# p enters seed keys as an integer number of millionths
P_KEY_SCALE = 1_000_000

DESK_I_GRID = (20, 60, 120)
DESK_P_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
DESK_B = 100
PAPER_I_GRID = (20, 40, 60, 80, 100, 120)
PAPER_P_GRID = tuple(round(0.05 * k, 2) for k in range(21))
PAPER_B = 1000

MEASURES = ("measure1", "measure2", "measure3", "measure4")


def _center_distances(points: np.ndarray, centers) -> np.ndarray:
    c = np.asarray(centers, dtype=float)
    return np.sqrt(((points[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))


def detected_centers(result: ThresholdResult, cfg: SimConfig) -> frozenset[int]:
    """1-based indices of centers with a significant voxel center within R95."""
    if result.mask is not cfg.mask and result.mask.sha256 != cfg.mask.sha256:
        raise ValueError("result and simulation config use different masks")
    pts = result.mask.coords[np.asarray(result.sig, dtype=bool)]
    if pts.shape[0] == 0:
        return frozenset()
    near = (_center_distances(pts, cfg.centers) <= cfg.r95).any(axis=0)
    return frozenset(int(j) + 1 for j in np.flatnonzero(near))


def true_voxels(cfg: SimConfig) -> np.ndarray:
    """In-mask voxels within R95 of some center."""
    return (_center_distances(cfg.mask.coords, cfg.centers) <= cfg.r95).any(axis=1)


@dataclass(frozen=True)
class ReplicateOutcome:
    detected: frozenset
    tpr: float
    any_sig: bool


def replicate_outcome(result: ThresholdResult, cfg: SimConfig, truth: np.ndarray | None = None) -> ReplicateOutcome:
    truth = true_voxels(cfg) if truth is None else truth
    sig = np.asarray(result.sig, dtype=bool)
    tpr = float((sig & truth).sum() / truth.sum()) if truth.any() else 0.0
    return ReplicateOutcome(detected_centers(result, cfg), tpr, bool(sig.any()))


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def power_measures(detections, tprs, n_centers: int = 8) -> dict:
    """The four measures (with standard errors) from per-replicate outcomes.

    ``detections`` holds one collection of detected center indices per
    replicate and ``tprs`` the matching voxel-wise true positive rates.
    """
    counts = np.array([len(d) for d in detections], dtype=float)
    if counts.size < 1:
        raise ValueError("need at least one replicate")
    if len(tprs) != counts.size:
        raise ValueError("detections and tprs differ in length")
    out = {}
    for name, x in (
        ("measure1", counts >= 1),
        ("measure2", counts >= n_centers),
        ("measure3", counts),
        ("measure4", np.asarray(tprs, dtype=float)),
    ):
        out[name], out[name + "_se"] = _mean_se(x)
    return out


@dataclass(frozen=True)
class PowerCell:
    I: int
    p: float
    B: int
    n_valid: int
    measure1: float
    measure1_se: float
    measure2: float
    measure2_se: float
    measure3: float
    measure3_se: float
    measure4: float
    measure4_se: float
    # fraction of replicates with any significant voxel; the familywise error at p = 0
    any_sig: float
    any_sig_se: float

    @property
    def Ip(self) -> float:
        return self.I * self.p

    def value(self, measure: str) -> tuple[float, float]:
        return getattr(self, measure), getattr(self, measure + "_se")


CELL_FIELDS = tuple(f.name for f in fields(PowerCell))


@dataclass(frozen=True)
class PowerReport:
    cells: tuple[PowerCell, ...]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cells:
            raise ValueError("a power report needs at least one cell")

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def cell(self, I: int, p: float) -> PowerCell:
        for c in self.cells:
            if c.I == I and abs(c.p - p) < 1e-12:
                return c
        raise KeyError((I, p))

    @property
    def I_values(self) -> list[int]:
        return sorted({c.I for c in self.cells})

    @property
    def p_values(self) -> list[float]:
        return sorted({c.p for c in self.cells})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CELL_FIELDS)
        for c in self.cells:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple_cell(c)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, config: dict | None = None) -> PowerReport:
        rows = list(csv.DictReader(io.StringIO(text)))
        ints = {"I", "B", "n_valid"}
        cells = tuple(
            PowerCell(**{k: int(r[k]) if k in ints else float(r[k]) for k in CELL_FIELDS}) for r in rows
        )
        return cls(cells, config or {})

    def to_json(self) -> str:
        payload = {
            "fingerprint": self.fingerprint,
            "config": self.config,
            "cells": [asdict(c) for c in self.cells],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> PowerReport:
        payload = json.loads(text)
        return cls(tuple(PowerCell(**c) for c in payload["cells"]), payload["config"])


def astuple_cell(c: PowerCell) -> tuple:
    return tuple(getattr(c, k) for k in CELL_FIELDS)


def p_key(p: float) -> int:
    return int(round(p * P_KEY_SCALE))


def replicate_seed(seed: int, I: int, p: float, r: int) -> int:
    """Integer seed for the Monte Carlo parts of replicate r of cell (I, p)."""
    ss = np.random.SeedSequence(seed, spawn_key=(INFERENCE_STREAM, I, p_key(p), r))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def run_replicate(I: int, p: float, r: int, seed: int, kernel: KernelSpec, spec: InferenceSpec,
                  sim: dict, mask: BrainMask, truth: np.ndarray | None = None) -> ReplicateOutcome:
    """Simulate one dataset, analyze it and score the detections."""
    cfg = SimConfig(mask, I, p, **sim)
    data = gen_dataset(cfg, stream(seed, SIM_STREAM, I, p_key(p), r))
    # detections only need the significance map, so the exact null skips deep-tail passes
    res = analyze(data, kernel, mask, spec, seed=replicate_seed(seed, I, p, r), assume_positive=True,
                  resolve_tail=False)
    return replicate_outcome(res.result, cfg, truth)


def _run_chunk(tasks, seed, kernel, spec, sim, mask):
    truth = true_voxels(SimConfig(mask, 1, 0.0, **sim))
    return [run_replicate(I, p, r, seed, kernel, spec, sim, mask, truth) for I, p, r in tasks]


def sweep(
    I_grid,
    p_grid,
    B: int,
    kernel: KernelSpec,
    spec: InferenceSpec,
    mask: BrainMask,
    seed: int,
    sim: dict | None = None,
    n_jobs: int = 1,
    progress=None,
    timings: dict | None = None,
) -> PowerReport:
    """One report cell per (I, p).

    Replicate r of cell (I, p) draws its dataset from stream
    (seed, I, p, r), so every cell is reproducible on its own and the report
    does not depend on ``n_jobs``. ``sim`` holds extra :class:`SimConfig`
    settings (centers, report_dist, scatter_sd_mm, n_participants). Wall
    times per cell go into ``timings`` when given, never into the report.
    """
    I_grid = [int(i) for i in I_grid]
    p_grid = [float(p) for p in p_grid]
    if not I_grid or not p_grid:
        raise ValueError("I and p grids must be nonempty")
    if B < 1:
        raise ValueError("B must be >= 1")
    sim = dict(sim or {})
    probe = SimConfig(mask, 1, 0.0, **sim)
    n_centers = len(probe.centers)
    config = {
        "I_grid": I_grid,
        "p_grid": p_grid,
        "B": B,
        "kernel": kernel.to_dict(),
        "inference": spec.to_dict(),
        "seed": int(seed),
        "sim": {k: v for k, v in probe.to_dict().items() if k not in ("n_studies", "valid_fraction", "seed")},
    }

    parallel = None
    if n_jobs != 1:
        from joblib import Parallel

        parallel = Parallel(n_jobs=n_jobs)

    cells = []
    for I in I_grid:
        for p in p_grid:
            t0 = time.perf_counter()
            tasks = [(I, p, r) for r in range(B)]
            if parallel is None:
                outcomes = _run_chunk(tasks, seed, kernel, spec, sim, mask)
            else:
                from joblib import delayed

                n_chunks = min(B, 4 * max(1, abs(n_jobs)))
                chunks = [tasks[a::n_chunks] for a in range(n_chunks)]
                parts = parallel(delayed(_run_chunk)(c, seed, kernel, spec, sim, mask) for c in chunks)
                outcomes = [None] * B
                for a, part in enumerate(parts):
                    outcomes[a::n_chunks] = part
            m = power_measures([o.detected for o in outcomes], [o.tpr for o in outcomes], n_centers)
            any_sig, any_se = _mean_se([o.any_sig for o in outcomes])
            n_valid = SimConfig(mask, I, p, **sim).n_valid
            cells.append(PowerCell(I, p, B, n_valid, **m, any_sig=any_sig, any_sig_se=any_se))
            elapsed = time.perf_counter() - t0
            if timings is not None:
                timings[f"I={I},p={p!r}"] = elapsed
            if progress is not None:
                progress(cells[-1], elapsed)
    return PowerReport(tuple(cells), config)


def stderr_progress(cell: PowerCell, elapsed: float) -> None:
    print(
        f"cell I={cell.I} p={cell.p:g}: m1={cell.measure1:.3f} m2={cell.measure2:.3f} "
        f"m3={cell.measure3:.2f} m4={cell.measure4:.3f} ({elapsed:.1f}s)",
        file=sys.stderr,
        flush=True,
    )


# --------------------------------------------------------------------------
# Charts

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


def line_chart_svg(series: dict, xlabel: str, ylabel: str, ymax: float, title: str = "") -> str:
    """Minimal SVG line chart; ``series`` maps a legend label to (x, y) lists."""
    W, H, L, R, T, Bm = 480, 320, 60, 110, 30, 45
    xs = [x for xv, _ in series.values() for x in xv]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def sy(y):
        return H - Bm - y / ymax * (H - T - Bm)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{L}" y1="{H - Bm}" x2="{W - R}" y2="{H - Bm}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - Bm}" stroke="black"/>',
    ]
    for k in range(6):
        y = ymax * k / 5
        out.append(f'<line x1="{L - 4}" y1="{sy(y):.1f}" x2="{L}" y2="{sy(y):.1f}" stroke="black"/>')
        out.append(f'<text x="{L - 7}" y="{sy(y) + 4:.1f}" text-anchor="end">{_fmt(y)}</text>')
    ticks = sorted(set(xs))
    if len(ticks) > 11:
        ticks = list(np.linspace(x0, x1, 6))
    for x in ticks:
        out.append(f'<line x1="{sx(x):.1f}" y1="{H - Bm}" x2="{sx(x):.1f}" y2="{H - Bm + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(x):.1f}" y="{H - Bm + 16}" text-anchor="middle">{_fmt(x)}</text>')
    out.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(
        f'<text x="14" y="{(T + H - Bm) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(T + H - Bm) / 2:.1f})">{ylabel}</text>'
    )
    for i, (label, (xv, yv)) in enumerate(series.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xv, yv))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        for x, y in zip(xv, yv):
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{colour}"/>')
        ly = T + 14 * i + 6
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 28}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 32}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


MEASURE_LABELS = {
    "measure1": "P(at least one center detected)",
    "measure2": "P(all centers detected)",
    "measure3": "mean centers detected",
    "measure4": "mean voxel true positive rate",
}


def report_charts(report: PowerReport) -> dict[str, str]:
    """SVG text per file name: each measure against p and against I p, one line per I."""
    n_centers = len(report.config.get("sim", {}).get("centers", [None] * 8))
    charts = {}
    for m in MEASURES:
        ymax = float(n_centers) if m == "measure3" else 1.0
        for axis, xlabel in (("p", "proportion of valid studies p"), ("Ip", "number of valid studies Ip")):
            series = {}
            for I in report.I_values:
                cells = sorted((c for c in report.cells if c.I == I), key=lambda c: c.p)
                xv = [c.p if axis == "p" else c.Ip for c in cells]
                series[f"I={I}"] = (xv, [getattr(c, m) for c in cells])
            charts[f"{m}_vs_{axis}.svg"] = line_chart_svg(series, xlabel, MEASURE_LABELS[m], ymax, m)
    return charts


def emit_report(report: PowerReport, out_dir, timings: dict | None = None) -> list:
    """Write report.csv, report.json and the SVG charts; returns the written paths."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"report.csv": report.to_csv(), "report.json": report.to_json(), **report_charts(report)}
    if timings is not None:
        files["timing.json"] = json.dumps(timings, indent=2, sort_keys=True) + "\n"
    written = []
    for name, text in files.items():
        atomic_write_text(out_dir / name, text)
        written.append(out_dir / name)
    return written
