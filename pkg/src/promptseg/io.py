"""Volume and mask file formats.

nifti1
    Single-file ``.nii``, little-endian, 348-byte header, 4 zero extension
    bytes, data at offset 352. Only ``dim`` and ``pixdim`` are interpreted;
    the affine (qform/sform) is ignored on read and written as code 0.
    Datatype 16 (float32) for volumes, 2 (uint8) for masks. Data is stored
    with the first axis varying fastest, as the format requires, i.e. the
    Fortran-order bytes of our ``(dims[0], dims[1], dims[2])`` array.

rawpair
    ``<stem>.raw`` holds the voxel values, little-endian, C order (last axis
    fastest), no header. ``<stem>.json`` holds::

        {"format": "rawpair", "version": 1, "dims": [nx, ny, nz],
         "spacing": [sx, sy, sz], "dtype": "f32le" | "u8", "order": "C"}
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import BinaryMask, InvalidGeometryError, NonFiniteDataError, Volume


class VolumeIOError(Exception):
    """Base class for file-format failures."""


class MalformedHeaderError(VolumeIOError):
    pass


class UnsupportedDatatypeError(VolumeIOError):
    pass


class BadGeometryError(VolumeIOError):
    pass


class NonFiniteValuesError(VolumeIOError):
    pass


FORMATS = ("nifti1", "rawpair")
NIFTI_MAGIC = b"n+1\x00"
_NIFTI_DTYPES = {2: np.dtype("<u1"), 16: np.dtype("<f4")}
_RAW_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("<u1")}


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".nii":
        return "nifti1"
    if suffix in (".raw", ".json"):
        return "rawpair"
    raise ValueError(f"cannot infer volume format from {path!s}")


def extension(fmt: str) -> str:
    return {"nifti1": ".nii", "rawpair": ".raw"}[fmt]


def _rawpair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_suffix(".raw"), p.with_suffix(".json")


def output_files(path, fmt: str) -> list[Path]:
    """Files written by ``write_volume(..., path, fmt)``."""
    if fmt == "rawpair":
        return list(_rawpair_paths(path))
    return [Path(path)]


# --------------------------------------------------------------------------
# reading


def _read_nifti(path) -> tuple[np.ndarray, tuple, str]:
    raw = Path(path).read_bytes()
    if len(raw) < 352:
        raise MalformedHeaderError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise MalformedHeaderError(f"{path}: sizeof_hdr={sizeof_hdr}, expected 348 (little-endian)")
    if raw[344:348] != NIFTI_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, _bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise MalformedHeaderError(f"{path}: expected a 3D image, dim={dim}")
    dims = tuple(int(d) for d in dim[1:4])
    spacing = tuple(float(abs(s)) for s in pixdim[1:4])
    if any(d <= 0 for d in dims) or any(not s > 0 for s in spacing):
        raise BadGeometryError(f"{path}: dims {dims} / spacing {spacing} not positive")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
    dtype = _NIFTI_DTYPES[datatype]
    offset = int(vox_offset)
    n = int(np.prod(dims))
    if offset < 352 or len(raw) < offset + n * dtype.itemsize:
        raise MalformedHeaderError(f"{path}: truncated data (offset {offset}, {n} voxels)")
    flat = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    data = flat.reshape(dims, order="F")
    return data, spacing, "u8" if datatype == 2 else "f32le"


def _read_rawpair(path) -> tuple[np.ndarray, tuple, str]:
    raw_path, hdr_path = _rawpair_paths(path)
    try:
        hdr = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{hdr_path}: {exc}") from exc
    if not isinstance(hdr, dict) or hdr.get("format") != "rawpair":
        raise MalformedHeaderError(f"{hdr_path}: not a rawpair header")
    try:
        dims = tuple(int(d) for d in hdr["dims"])
        spacing = tuple(float(s) for s in hdr["spacing"])
        code = hdr["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{hdr_path}: {exc!r}") from exc
    if hdr.get("order", "C") != "C":
        raise MalformedHeaderError(f"{hdr_path}: only C order is supported")
    if len(dims) != 3 or len(spacing) != 3:
        raise MalformedHeaderError(f"{hdr_path}: dims/spacing must have 3 entries")
    if any(d <= 0 for d in dims) or any(not s > 0 for s in spacing):
        raise BadGeometryError(f"{hdr_path}: dims {dims} / spacing {spacing} not positive")
    if code not in _RAW_DTYPES:
        raise UnsupportedDatatypeError(f"{hdr_path}: dtype {code!r}")
    dtype = _RAW_DTYPES[code]
    buf = raw_path.read_bytes()
    n = int(np.prod(dims))
    if len(buf) != n * dtype.itemsize:
        raise MalformedHeaderError(f"{raw_path}: {len(buf)} bytes, expected {n * dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype).reshape(dims), spacing, code


def _read(path, format):
    fmt = format or infer_format(path)
    if fmt == "nifti1":
        return _read_nifti(path)
    if fmt == "rawpair":
        return _read_rawpair(path)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def load_volume(path, format: str | None = None) -> Volume:
    data, spacing, _ = _read(path, format)
    try:
        return Volume(data, spacing)
    except NonFiniteDataError as exc:
        raise NonFiniteValuesError(f"{path}: {exc}") from exc
    except InvalidGeometryError as exc:
        raise BadGeometryError(f"{path}: {exc}") from exc


def load_mask(path, format: str | None = None) -> BinaryMask:
    data, spacing, _ = _read(path, format)
    if not np.isfinite(data).all():
        raise NonFiniteValuesError(f"{path}: mask contains NaN or Inf")
    if not np.isin(data, (0, 1)).all():
        raise VolumeIOError(f"{path}: mask values outside {{0, 1}}")
    return BinaryMask(data != 0, spacing)


# --------------------------------------------------------------------------
# writing


def _nifti_header(dims, spacing, datatype: int, bitpix: int) -> bytes:
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("B", hdr, 123, 10)  # xyzt_units: mm, s
    hdr[344:348] = NIFTI_MAGIC
    return bytes(hdr)


def write_volume(v, path, format: str | None = None) -> list[Path]:
    """Write a Volume or BinaryMask; returns the list of files written."""
    fmt = format or infer_format(path)
    is_mask = isinstance(v, BinaryMask)
    if not isinstance(v, (Volume, BinaryMask)):
        raise TypeError(f"expected Volume or BinaryMask, got {type(v).__name__}")
    data = v.data.astype("<u1") if is_mask else v.data.astype("<f4")
    if fmt == "nifti1":
        path = Path(path)
        header = _nifti_header(v.dims, v.spacing, 2 if is_mask else 16, 8 if is_mask else 32)
        path.write_bytes(header + data.tobytes(order="F"))
        return [path]
    if fmt == "rawpair":
        raw_path, hdr_path = _rawpair_paths(path)
        hdr = {
            "format": "rawpair",
            "version": 1,
            "dims": list(v.dims),
            "spacing": list(v.spacing),
            "dtype": "u8" if is_mask else "f32le",
            "order": "C",
        }
        raw_path.write_bytes(data.tobytes(order="C"))
        hdr_path.write_text(json.dumps(hdr, indent=2) + "\n")
        return [raw_path, hdr_path]
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
