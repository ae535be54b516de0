"""Minimal single-file NIfTI-1 reader/writer (.nii and .nii.gz).

Covers exactly what this package needs: 3D scalar grids and 4D vector
grids with voxel spacing, in the standard on-disk Fortran element order.
Orientation matrices are written as plain voxel-spacing scalings and are
otherwise ignored; intensity scaling (``scl_slope``/``scl_inter``) is
applied on read when present.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError

__all__ = ["read_nifti", "write_nifti"]

HEADER_SIZE = 348
HEADER_FORMAT = (
    "<i 10s 18s i h c c 8h 3f h h h h 8f f f f h c c f f f f i i 80s 24s "
    "h h 3f 3f 4f 4f 4f 16s 4s"
)

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 file into ``(array, spacing)``.

    The array keeps the header's dimensionality (callers enforce 3D/4D as
    appropriate) and the file's index order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    blob = _open_bytes(path)
    if len(blob) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")

    swapped = False
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        sizeof_hdr = struct.unpack_from(">i", blob, 0)[0]
        if sizeof_hdr != HEADER_SIZE:
            raise VolumeFormatError(f"{path}: bad NIfTI header (sizeof_hdr != 348)")
        swapped = True
    order = ">" if swapped else "<"
    fields = struct.unpack_from(order + HEADER_FORMAT[1:], blob, 0)

    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope, scl_inter = fields[31], fields[32]
    magic = fields[-1]

    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0] = {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if any(d < 1 for d in shape):
        raise VolumeFormatError(f"{path}: invalid shape {shape}")
    if datatype not in _DTYPE_CODES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")

    dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder(order)
    count = int(np.prod(shape))
    end = vox_offset + count * dtype.itemsize
    if len(blob) < end:
        raise VolumeFormatError(f"{path}: truncated data section")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="), copy=True)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + scl_inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return data, spacing


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D or 4D array as single-file NIfTI-1; ``.gz`` paths are gzipped."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise VolumeFormatError(f"can only write 3D or 4D arrays, got shape {data.shape}")
    dtype = data.dtype.newbyteorder("=")
    if np.dtype(dtype) not in _CODE_FOR_DTYPE:
        raise VolumeFormatError(f"unsupported dtype for NIfTI output: {data.dtype}")
    code = _CODE_FOR_DTYPE[np.dtype(dtype)]

    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    pixdim = [1.0, *(float(s) for s in spacing)] + [1.0] * 4
    sx, sy, sz = (float(s) for s in spacing)
    header = struct.pack(
        "<" + HEADER_FORMAT[1:],
        HEADER_SIZE,
        b"", b"", 0, 0, b"r", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0,
        code,
        np.dtype(dtype).itemsize * 8,
        0,
        *pixdim,
        352.0,  # vox_offset
        1.0, 0.0,  # scl_slope, scl_inter
        0, b"\x00", b"\x00",
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"lapreg", b"",
        0, 2,  # qform unused, sform = aligned
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
        sx, 0.0, 0.0, 0.0,
        0.0, sy, 0.0, 0.0,
        0.0, 0.0, sz, 0.0,
        b"",
        b"n+1\x00",
    )
    payload = header + b"\x00\x00\x00\x00" + np.ascontiguousarray(
        data.astype(dtype, copy=False), dtype=dtype
    ).tobytes(order="F")
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(payload, mtime=0))
    else:
        path.write_bytes(payload)
