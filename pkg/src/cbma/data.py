"""Domain types for foci datasets, voxel grids and brain masks."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

LGR = logging.getLogger(__name__)

ATLAS_TAGS = ("MNI", "Talairach", "Unspecified")
METHODS = ("MKDA", "ALE", "SDM")

DEFAULT_COLUMNS = {
    "author": "Author",
    "year": "Year",
    "label": ["Emotion", "Label"],
    "x": "X",
    "y": "Y",
    "z": "Z",
    "participants": "Participants",
    "t_value": ["T", "t_value"],
}


class FociParseError(ValueError):
    """A row of a foci table could not be parsed."""


class FociValidationError(ValueError):
    """A foci table parsed but describes an invalid dataset."""


@dataclass(frozen=True)
class Focus:
    x: float
    y: float
    z: float
    t_value: float | None = None

    def __post_init__(self):
        for name in ("x", "y", "z"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"focus coordinate {name}={value} is not finite")
            object.__setattr__(self, name, value)
        if self.t_value is not None:
            t = float(self.t_value)
            if not math.isfinite(t) or t == 0:
                raise ValueError(f"t_value must be finite and nonzero, got {t}")
            object.__setattr__(self, "t_value", t)

    @property
    def xyz(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class Study:
    """One contrast of a meta-analysis.

    ``label`` is the contrast name (e.g. the emotion); ``author`` and ``year``
    complete the identifying triple used by the CSV format.
    """

    id: str
    label: str
    n_participants: int
    foci: tuple[Focus, ...] = ()
    author: str = ""
    year: str = ""

    def __post_init__(self):
        if int(self.n_participants) != self.n_participants or self.n_participants < 1:
            raise ValueError(f"n_participants must be a positive integer, got {self.n_participants}")
        object.__setattr__(self, "n_participants", int(self.n_participants))
        object.__setattr__(self, "foci", tuple(self.foci))

    @property
    def coordinates(self) -> np.ndarray:
        """Foci as an ``(K, 3)`` float array in mm."""
        if not self.foci:
            return np.zeros((0, 3))
        return np.array([f.xyz for f in self.foci], dtype=float)


@dataclass(frozen=True)
class FociDataset:
    studies: tuple[Study, ...]
    atlas_tag: str = "Unspecified"

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        if not self.studies:
            raise FociValidationError("no studies")
        ids = [s.id for s in self.studies]
        if len(set(ids)) != len(ids):
            raise FociValidationError("study ids are not unique")
        if self.atlas_tag not in ATLAS_TAGS:
            raise ValueError(f"unknown atlas tag {self.atlas_tag!r}")

    def __len__(self):
        return len(self.studies)

    @property
    def n_foci(self) -> int:
        return sum(len(s.foci) for s in self.studies)

    @property
    def participants(self) -> np.ndarray:
        return np.array([s.n_participants for s in self.studies], dtype=float)

    def sha256(self) -> str:
        """Hash of the canonical CSV serialization."""
        return hashlib.sha256(dump_foci_csv(self).encode("utf-8")).hexdigest()


def check_atlas_tags(datasets) -> None:
    """Warn when datasets declare different atlas spaces (no conversion is done)."""
    tags = {d.atlas_tag for d in datasets if d.atlas_tag != "Unspecified"}
    if len(tags) > 1:
        LGR.warning("mixing atlas tags %s; coordinates are used as given", sorted(tags))


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Dense 3D field on a regular lattice.

    ``data`` has shape ``dims`` and is stored C-ordered, so the flat
    (row-major) index of voxel ``(i, j, k)`` is ``(i * ny + j) * nz + k``.
    ``origin`` is the world position of the center of voxel ``(0, 0, 0)``.
    """

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        size = tuple(float(s) for s in self.voxel_size)
        if len(size) != 3 or min(size) <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        origin = tuple(float(o) for o in self.origin)
        data = np.asarray(self.data)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"data has {data.size} elements, expected {np.prod(dims)}")
        data = np.ascontiguousarray(data.reshape(dims))
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    @property
    def affine(self) -> np.ndarray:
        aff = np.diag([*self.voxel_size, 1.0])
        aff[:3, 3] = self.origin
        return aff

    def same_lattice(self, other: VolumeGrid) -> bool:
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and self.origin == other.origin
        )

    def with_data(self, data) -> VolumeGrid:
        return VolumeGrid(self.dims, self.voxel_size, self.origin, data)

    def world_to_voxel(self, p):
        return world_to_voxel(p, self)

    def voxel_to_world(self, index):
        return voxel_to_world(index, self)


def world_to_voxel(p, grid: VolumeGrid) -> tuple[int, int, int] | None:
    """Index of the voxel whose center is nearest to ``p``, or None if out of bounds.

    Rounding is half-away-from-zero per component, so a point exactly between
    two centers goes to the one farther from the origin voxel.
    """
    idx = []
    for c, o, s, n in zip(p, grid.origin, grid.voxel_size, grid.dims):
        u = (float(c) - o) / s
        r = math.floor(u + 0.5) if u >= 0 else -math.floor(-u + 0.5)
        if r < 0 or r >= n:
            return None
        idx.append(int(r))
    return tuple(idx)


def voxel_to_world(index, grid: VolumeGrid) -> tuple[float, float, float]:
    return tuple(o + i * s for i, o, s in zip(index, grid.origin, grid.voxel_size))


def euclidean_distance(a, b) -> float:
    return math.sqrt(sum((float(u) - float(v)) ** 2 for u, v in zip(a, b)))


class BrainMask:
    """Boolean volume defining the search space.

    In-mask voxels are addressed by their *position* ``0 .. V-1`` in row-major
    order; most computations work on length-``V`` vectors rather than full
    volumes.
    """

    def __init__(self, grid: VolumeGrid):
        if grid.data.dtype != bool:
            grid = grid.with_data(grid.data != 0)
        self.grid = grid
        self.flat_index = np.flatnonzero(grid.data.ravel())
        self.flat_index.flags.writeable = False
        self.n_in_mask = int(self.flat_index.size)
        if self.n_in_mask < 1:
            raise ValueError("mask has no in-mask voxels")

    def __repr__(self):
        return f"BrainMask(dims={self.grid.dims}, voxel_size={self.grid.voxel_size}, V={self.n_in_mask})"

    @property
    def dims(self):
        return self.grid.dims

    @property
    def voxel_size(self):
        return self.grid.voxel_size

    @property
    def origin(self):
        return self.grid.origin

    @cached_property
    def ijk(self) -> np.ndarray:
        """``(V, 3)`` integer voxel indices of in-mask voxels."""
        out = np.column_stack(np.unravel_index(self.flat_index, self.dims)).astype(np.int64)
        out.flags.writeable = False
        return out

    @cached_property
    def coords(self) -> np.ndarray:
        """``(V, 3)`` world coordinates (mm) of in-mask voxel centers."""
        out = self.ijk * np.asarray(self.voxel_size) + np.asarray(self.origin)
        out.flags.writeable = False
        return out

    @cached_property
    def position(self) -> np.ndarray:
        """Volume-shaped lookup from voxel to mask position (-1 outside)."""
        pos = np.full(self.dims, -1, dtype=np.int64)
        pos.ravel()[self.flat_index] = np.arange(self.n_in_mask)
        pos.flags.writeable = False
        return pos

    @cached_property
    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.dims, self.voxel_size, self.origin)).encode())
        h.update(np.packbits(self.grid.data.ravel()).tobytes())
        return h.hexdigest()

    def to_volume(self, values, fill=0) -> np.ndarray:
        """Scatter a length-V vector into a volume-shaped array."""
        values = np.asarray(values)
        vol = np.full(self.dims, fill, dtype=values.dtype)
        vol.ravel()[self.flat_index] = values
        return vol

    def to_grid(self, values, fill=0) -> VolumeGrid:
        return self.grid.with_data(self.to_volume(values, fill))

    def from_grid(self, grid: VolumeGrid) -> np.ndarray:
        if not self.grid.same_lattice(grid):
            raise ValueError("grid does not share the mask lattice")
        return np.asarray(grid.data).ravel()[self.flat_index]

    def contains(self, points) -> np.ndarray:
        """True for world points whose nearest voxel center is in the mask."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        u = (points - np.asarray(self.origin)) / np.asarray(self.voxel_size)
        idx = np.where(u >= 0, np.floor(u + 0.5), -np.floor(-u + 0.5)).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        out = np.zeros(len(points), dtype=bool)
        ii = idx[inside]
        out[inside] = self.grid.data[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out


def ellipsoid_mask(
    voxel_size: float = 2.0,
    origin=(-90.0, -126.0, -72.0),
    extent=(180.0, 216.0, 180.0),
    semi_axes=(70.0, 85.0, 75.0),
) -> BrainMask:
    """Rectangular grid that is true inside an inscribed ellipsoid.

    With the defaults this is the 91 x 109 x 91, 2 mm test mask; pass
    ``voxel_size=4`` for the 46 x 55 x 46 desk-scale version with the same
    field of view.
    """
    dims = tuple(int(round(e / voxel_size)) + 1 for e in extent)
    center = np.asarray(origin) + np.asarray(extent) / 2.0
    axes = [np.asarray(origin)[d] + voxel_size * np.arange(dims[d]) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    r2 = (
        ((gx - center[0]) / semi_axes[0]) ** 2
        + ((gy - center[1]) / semi_axes[1]) ** 2
        + ((gz - center[2]) / semi_axes[2]) ** 2
    )
    grid = VolumeGrid(dims, (voxel_size,) * 3, tuple(origin), r2 <= 1.0)
    return BrainMask(grid)


def ellipsoid_center(origin=(-90.0, -126.0, -72.0), extent=(180.0, 216.0, 180.0)):
    return tuple(float(o + e / 2.0) for o, e in zip(origin, extent))


@dataclass(eq=False)
class StatImage:
    """Meta-analytic statistic over the in-mask voxels.

    ``values`` is a length-V vector; ``grid`` scatters it into a volume with
    zeros outside the mask. ``config_key`` identifies the dataset, kernel,
    weights and mask that produced it, so inference steps can refuse a null
    distribution built for something else.
    """

    values: np.ndarray
    method: str
    mask: BrainMask
    config_key: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mask.n_in_mask,):
            raise ValueError("statistic vector length does not match the mask")

    @property
    def grid(self) -> VolumeGrid:
        return self.mask.to_grid(self.values)

    def max(self) -> float:
        return float(self.values.max())

    def argmax_world(self) -> tuple[float, float, float]:
        return tuple(float(c) for c in self.mask.coords[int(np.argmax(self.values))])

    def summary(self) -> dict:
        voxel_volume = float(np.prod(self.mask.voxel_size))
        return {
            "method": self.method,
            "max": self.max(),
            "argmax_mm": list(self.argmax_world()),
            "n_in_mask": self.mask.n_in_mask,
            "mask_volume_mm3": self.mask.n_in_mask * voxel_volume,
        }


# --------------------------------------------------------------------------
# Foci CSV


def _resolve(header, wanted):
    options = [wanted] if isinstance(wanted, str) else list(wanted)
    lowered = {h.strip().lower(): h for h in header}
    for opt in options:
        if opt in header:
            return opt
        if opt.lower() in lowered:
            return lowered[opt.lower()]
    return None


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json") if path.suffix else Path(str(path) + ".json")


def study_id(author: str, year: str, label: str) -> str:
    return " ".join(p for p in (author, year, label) if p)


def load_foci_csv(path, mapping: dict | None = None) -> FociDataset:
    """Read a foci table laid out like the classic author/year/contrast tables.

    Parameters
    ----------
    path : str or Path
        UTF-8 comma-separated file with a header row.
    mapping : dict, optional
        Column mapping with keys ``author``, ``year``, ``label``, ``x``, ``y``,
        ``z``, ``participants``, ``t_value`` and optionally ``atlas``. When
        omitted, a JSON sidecar ``<path>.json`` is used if present, then the
        default column names.

    Rows whose author, year and label are all blank continue the previous
    study. A row with blank X, Y and Z contributes no focus (this is how a
    study that reports no foci is written).
    """
    path = Path(path)
    if mapping is None:
        side = _sidecar(path)
        mapping = json.loads(side.read_text()) if side.exists() else {}
    cols = {**DEFAULT_COLUMNS, **{k: v for k, v in mapping.items() if k != "atlas"}}
    atlas = mapping.get("atlas", "Unspecified")

    with open(path, newline="", encoding="utf-8-sig") as fh:
        return _parse_rows(csv.reader(fh), cols, atlas, str(path))


def _parse_rows(reader, cols, atlas, source) -> FociDataset:
    try:
        header = next(reader)
    except StopIteration:
        raise FociValidationError(f"{source}: no studies (empty file)") from None
    header = [h.strip() for h in header]
    resolved = {k: _resolve(header, v) for k, v in cols.items()}
    for key in ("author", "year", "label", "x", "y", "z", "participants"):
        if resolved[key] is None:
            raise FociValidationError(f"{source}: column for {key!r} not found in header {header}")
    pos = {k: header.index(v) for k, v in resolved.items() if v is not None}

    order = []
    groups: dict[tuple, dict] = {}
    prev = None
    for lineno, row in enumerate(reader, start=2):
        if not any(cell.strip() for cell in row):
            continue
        row = row + [""] * (len(header) - len(row))
        cell = {k: row[i].strip() for k, i in pos.items()}
        key = (cell["author"], cell["year"], cell["label"])
        if key == ("", "", ""):
            if prev is None:
                raise FociParseError(f"{source}: line {lineno}: continuation row before any study")
            key = prev
        else:
            key = tuple(k or p for k, p in zip(key, prev or ("", "", "")))
        prev = key

        try:
            xyz = [cell[a] for a in ("x", "y", "z")]
            focus = None
            if any(xyz):
                t = cell.get("t_value", "")
                focus = Focus(*(float(c) for c in xyz), t_value=float(t) if t else None)
            n = int(float(cell["participants"])) if cell["participants"] else None
            if cell["participants"] and n != float(cell["participants"]):
                raise ValueError(f"participants {cell['participants']!r} is not an integer")
        except ValueError as err:
            raise FociParseError(f"{source}: line {lineno}: {err}") from None

        group = groups.get(key)
        if group is None:
            group = groups[key] = {"n": None, "foci": []}
            order.append(key)
        if n is not None:
            if group["n"] is not None and group["n"] != n:
                raise FociValidationError(
                    f"{source}: line {lineno}: participant count {n} differs from "
                    f"{group['n']} for study {' '.join(key)}"
                )
            group["n"] = n
        if focus is not None:
            group["foci"].append(focus)

    if not order:
        raise FociValidationError(f"{source}: no studies")
    studies = []
    for key in order:
        group = groups[key]
        if group["n"] is None:
            raise FociValidationError(f"{source}: study {' '.join(key)} has no participant count")
        author, year, label = key
        studies.append(
            Study(
                id=study_id(author, year, label),
                label=label,
                n_participants=group["n"],
                foci=group["foci"],
                author=author,
                year=year,
            )
        )
    return FociDataset(studies, atlas_tag=atlas)


def dump_foci_csv(dataset: FociDataset) -> str:
    """Canonical CSV text: one row per focus, every cell filled."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Author", "Year", "Label", "X", "Y", "Z", "Participants", "T"])
    keys = [(s.author, s.year, s.label) for s in dataset.studies]
    if len(set(keys)) != len(keys):
        raise FociValidationError("studies share an author/year/label triple and would merge on reload")
    for s in dataset.studies:
        rows = s.foci or (None,)
        for f in rows:
            if f is None:
                coords, t = ["", "", ""], ""
            else:
                coords = [repr(f.x), repr(f.y), repr(f.z)]
                t = "" if f.t_value is None else repr(f.t_value)
            writer.writerow([s.author, s.year, s.label, *coords, s.n_participants, t])
    return buf.getvalue()


def save_foci_csv(dataset: FociDataset, path) -> None:
    """Write the canonical CSV plus a sidecar recording the atlas tag."""
    from .io import atomic_write_text

    path = Path(path)
    atomic_write_text(path, dump_foci_csv(dataset))
    mapping = {"label": "Label", "t_value": "T", "atlas": dataset.atlas_tag}
    atomic_write_text(_sidecar(path), json.dumps(mapping, indent=2, sort_keys=True) + "\n")
