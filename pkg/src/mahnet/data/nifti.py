"""Reader/writer for the uncompressed single-file NIfTI-1 subset.

Only ``n+1`` files with int16 or float32 voxels are handled. Voxel arrays
are returned with shape (X, Y, Z), x varying fastest on disk.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32)}


class NiftiError(ValueError):
    pass


@dataclass
class VolumeRecord:
    dims: tuple[int, int, int]
    data: np.ndarray  # (X, Y, Z), scaling already applied
    source: str = ""

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError(f"volume dims must be positive, got {self.dims}")
        if self.data.shape != tuple(self.dims):
            raise ValueError(f"data shape {self.data.shape} != dims {self.dims}")


def parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\0":
        raise NiftiError(f"unsupported NIfTI magic {magic!r} (only single-file n+1)")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, 108)
    if datatype not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"bad dim[0]={ndim}")
    shape = [d for d in dim[1 : ndim + 1]]
    if ndim > 3 and any(d != 1 for d in shape[3:]):
        raise NiftiError("only 3-D volumes are supported")
    shape = (shape + [1, 1, 1])[:3]
    if any(d < 1 for d in shape):
        raise NiftiError(f"non-positive dims {shape}")
    return {
        "endian": endian,
        "dims": tuple(int(d) for d in shape),
        "datatype": datatype,
        "bitpix": bitpix,
        "vox_offset": int(vox_offset),
        "scl_slope": float(slope),
        "scl_inter": float(inter),
    }


def read_volume(path) -> VolumeRecord:
    raw = Path(path).read_bytes()
    hdr = parse_header(raw)
    code, _ = _DTYPES[hdr["datatype"]]
    dtype = np.dtype(hdr["endian"] + code)
    X, Y, Z = hdr["dims"]
    count = X * Y * Z
    start = max(hdr["vox_offset"], HEADER_SIZE)
    need = start + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiError(f"truncated voxel data: {len(raw)} bytes, need {need}")
    vox = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = vox.reshape(Z, Y, X).transpose(2, 1, 0)
    if hdr["scl_slope"] != 0.0:
        data = data.astype(np.float64) * hdr["scl_slope"] + hdr["scl_inter"]
    else:
        data = data.astype(dtype.newbyteorder("="))
    return VolumeRecord((X, Y, Z), np.ascontiguousarray(data), str(path))


def write_volume(path, data: np.ndarray, scl_slope: float = 0.0, scl_inter: float = 0.0) -> None:
    """Write a little-endian ``n+1`` file (used for fixtures and round-trips)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("expected an (X, Y, Z) array")
    if data.dtype == np.int16:
        code = DT_INT16
    elif data.dtype == np.float32:
        code = DT_FLOAT32
    else:
        raise ValueError(f"unsupported dtype {data.dtype}")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, _DTYPES[code][1])
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)  # qfac + pixdim
    struct.pack_into("<3f", hdr, 108, 352.0, scl_slope, scl_inter)
    hdr[344:348] = b"n+1\0"
    body = np.ascontiguousarray(data.transpose(2, 1, 0)).astype(data.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(hdr) + b"\0" * 4 + body)
