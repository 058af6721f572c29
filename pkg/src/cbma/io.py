"""Volume file formats (VGRID1, NIfTI-1) and atomic file writing."""

from __future__ import annotations

import gzip
import os
import tempfile
from pathlib import Path

import numpy as np

from .data import BrainMask, VolumeGrid

VGRID_MAGIC = "VGRID1"
VGRID_DTYPES = {"u8": np.dtype("<u1"), "f64": np.dtype("<f8")}

NIFTI_HEADER = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert NIFTI_HEADER.itemsize == 348

# NIfTI datatype code -> numpy type
NIFTI_CODES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2", 768: "u4"}


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _grid_dtype(grid: VolumeGrid) -> str:
    return "u8" if grid.data.dtype in (np.bool_, np.uint8) else "f64"


def vgrid_bytes(grid: VolumeGrid, dtype: str | None = None) -> bytes:
    dtype = dtype or _grid_dtype(grid)
    if dtype not in VGRID_DTYPES:
        raise ValueError(f"VGRID1 dtype must be one of {sorted(VGRID_DTYPES)}")
    fields = [*grid.dims, *(repr(v) for v in grid.voxel_size), *(repr(v) for v in grid.origin)]
    header = " ".join([VGRID_MAGIC, *map(str, fields), dtype]) + "\n"
    payload = np.ascontiguousarray(grid.data, dtype=VGRID_DTYPES[dtype]).tobytes(order="C")
    return header.encode("ascii") + payload


def write_vgrid(path, grid: VolumeGrid, dtype: str | None = None) -> None:
    atomic_write_bytes(path, vgrid_bytes(grid, dtype))


def read_vgrid(path) -> VolumeGrid:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise ValueError(f"{path}: missing VGRID1 header line")
    parts = raw[:end].decode("ascii").split()
    if len(parts) != 11 or parts[0] != VGRID_MAGIC:
        raise ValueError(f"{path}: not a VGRID1 file")
    dims = tuple(int(p) for p in parts[1:4])
    size = tuple(float(p) for p in parts[4:7])
    origin = tuple(float(p) for p in parts[7:10])
    dtype = parts[10]
    if dtype not in VGRID_DTYPES:
        raise ValueError(f"{path}: unsupported dtype {dtype!r}")
    n = dims[0] * dims[1] * dims[2]
    data = np.frombuffer(raw, dtype=VGRID_DTYPES[dtype], count=n, offset=end + 1)
    if len(raw) - end - 1 != n * VGRID_DTYPES[dtype].itemsize:
        raise ValueError(f"{path}: payload size does not match header")
    return VolumeGrid(dims, size, origin, data.astype(data.dtype.newbyteorder("=")).reshape(dims))


def nifti_bytes(grid: VolumeGrid, dtype: str | None = None, description: str = "") -> bytes:
    """Single-file NIfTI-1 image with an sform encoding voxel size and origin."""
    dtype = dtype or _grid_dtype(grid)
    code, np_type = {"u8": (2, "<u1"), "f64": (64, "<f8")}[dtype]
    hdr = np.zeros((), dtype=NIFTI_HEADER.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *grid.dims, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = np.dtype(np_type).itemsize * 8
    hdr["pixdim"] = [1.0, *grid.voxel_size, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = description.encode("ascii", "replace")[:79]
    hdr["qform_code"] = 2
    hdr["sform_code"] = 2
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = grid.origin
    aff = grid.affine
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = aff[0], aff[1], aff[2]
    hdr["magic"] = b"n+1"
    data = np.asarray(grid.data, dtype=np_type).tobytes(order="F")
    return hdr.tobytes() + b"\x00" * 4 + data


def write_nifti(path, grid: VolumeGrid, dtype: str | None = None, description: str = "") -> None:
    payload = nifti_bytes(grid, dtype, description)
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    atomic_write_bytes(path, payload)


def read_nifti(path) -> VolumeGrid:
    """Read a 3D NIfTI-1 image whose affine is diagonal (no rotations)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    endian = "<"
    hdr = np.frombuffer(raw[:348], dtype=NIFTI_HEADER.newbyteorder("<"))[0]
    if hdr["sizeof_hdr"] != 348:
        endian = ">"
        hdr = np.frombuffer(raw[:348], dtype=NIFTI_HEADER.newbyteorder(">"))[0]
        if hdr["sizeof_hdr"] != 348:
            raise ValueError(f"{path}: not a NIfTI-1 file")
    if hdr["magic"] not in (b"n+1", b"ni1"):
        raise ValueError(f"{path}: bad NIfTI magic {hdr['magic']!r}")
    ndim = int(hdr["dim"][0])
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    if ndim > 3 and any(int(d) > 1 for d in hdr["dim"][4 : ndim + 1]):
        raise ValueError(f"{path}: only 3D volumes are supported")
    code = int(hdr["datatype"])
    if code not in NIFTI_CODES:
        raise ValueError(f"{path}: unsupported NIfTI datatype {code}")
    np_type = np.dtype(endian + NIFTI_CODES[code])
    n = dims[0] * dims[1] * dims[2]
    offset = int(hdr["vox_offset"])
    data = np.frombuffer(raw, dtype=np_type, count=n, offset=offset).reshape(dims, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * slope + inter
    if hdr["sform_code"] > 0:
        aff = np.vstack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(float)
        if np.any(aff[:, :3] - np.diag(np.diag(aff[:, :3]))):
            raise ValueError(f"{path}: rotated or oblique affines are not supported")
        size = tuple(float(v) for v in np.diag(aff[:, :3]))
        origin = tuple(float(v) for v in aff[:, 3])
    else:
        size = tuple(float(v) for v in hdr["pixdim"][1:4])
        origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    if min(size) <= 0:
        raise ValueError(f"{path}: flipped axes are not supported")
    return VolumeGrid(dims, size, origin, np.ascontiguousarray(data, dtype=np_type.newbyteorder("=")))


# NIfTI xform codes that name a standard space
NIFTI_SPACES = {3: "Talairach", 4: "MNI"}


def nifti_space(path) -> str:
    """Atlas tag declared by a NIfTI header's sform (else qform) code."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=NIFTI_HEADER.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == 348:
            code = int(hdr["sform_code"]) or int(hdr["qform_code"])
            return NIFTI_SPACES.get(code, "Unspecified")
    raise ValueError(f"{path}: not a NIfTI-1 file")


def read_volume(path) -> VolumeGrid:
    name = str(path)
    if name.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    return read_vgrid(path)


def write_volume(path, grid: VolumeGrid, dtype: str | None = None) -> None:
    name = str(path)
    if name.endswith((".nii", ".nii.gz")):
        write_nifti(path, grid, dtype)
    else:
        write_vgrid(path, grid, dtype)


def load_mask(path) -> BrainMask:
    return BrainMask(read_volume(path))
