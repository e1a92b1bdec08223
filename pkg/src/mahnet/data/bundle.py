"""ULSB: an indexed, checksummed container of paired image/label slices.

Layout (little-endian)::

    "ULSB" | version u32 | record count u64
    per record:
        case id (u32 length + UTF-8) | patient id (u32 length + UTF-8)
        slice index u32 | H u32 | W u32
        image bytes (H*W uint8, row-major)
        label bits (ceil(H*W/8) bytes, np.packbits big-endian bit order)
    patient index:
        patient count u32
        per patient: id (u32 length + UTF-8) | range count u32 | (start u64, count u64)*
    CRC32C u32 over every preceding byte
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ULSB"
VERSION = 1


class BundleError(ValueError):
    pass


def _crc32c_table() -> list[int]:
    poly = 0x82F63B78  # Castagnoli, reflected
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc32c_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


@dataclass
class SliceRecord:
    image: np.ndarray  # (H, W) uint8
    label: np.ndarray  # (H, W) uint8 in {0, 1}
    case_id: str
    patient_id: str
    slice_index: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.label = np.asarray(self.label)
        if self.image.dtype != np.uint8 or self.image.ndim != 2:
            raise ValueError("image must be a 2-D uint8 array")
        if self.label.shape != self.image.shape:
            raise ValueError(f"label shape {self.label.shape} != image shape {self.image.shape}")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("label must be binary")
        self.label = self.label.astype(np.uint8)

    @property
    def key(self) -> str:
        return f"{self.case_id}:{self.slice_index}"

    def __eq__(self, other) -> bool:
        if not isinstance(other, SliceRecord):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.patient_id == other.patient_id
            and self.slice_index == other.slice_index
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.label, other.label)
        )


def build_index(records) -> dict[str, list[tuple[int, int]]]:
    """Patient id -> maximal runs of consecutive record positions."""
    index: dict[str, list[tuple[int, int]]] = {}
    for i, r in enumerate(records):
        runs = index.setdefault(r.patient_id, [])
        if runs and runs[-1][0] + runs[-1][1] == i:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((i, 1))
    return index


@dataclass
class DatasetBundle:
    records: list[SliceRecord]
    index: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    version: int = VERSION

    def __post_init__(self):
        if not self.index:
            self.index = build_index(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def patient_records(self, patient_id: str) -> list[SliceRecord]:
        return [self.records[i] for s, n in self.index[patient_id] for i in range(s, s + n)]

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])

    def labels(self) -> np.ndarray:
        return np.stack([r.label for r in self.records])


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_bundle(records) -> bytes:
    records = list(records)
    if not records:
        raise BundleError("cannot write an empty bundle")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(records))]
    for r in records:
        h, w = r.image.shape
        parts += [
            _pack_str(r.case_id),
            _pack_str(r.patient_id),
            struct.pack("<III", r.slice_index, h, w),
            np.ascontiguousarray(r.image).tobytes(),
            np.packbits(r.label.reshape(-1)).tobytes(),
        ]
    index = build_index(records)
    parts.append(struct.pack("<I", len(index)))
    for pid, runs in index.items():
        parts += [_pack_str(pid), struct.pack("<I", len(runs))]
        parts += [struct.pack("<QQ", s, n) for s, n in runs]
    body = b"".join(parts)
    return body + struct.pack("<I", crc32c(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise BundleError("bundle truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BundleError("bad UTF-8 in identifier") from exc


def decode_bundle(blob: bytes) -> DatasetBundle:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise BundleError("not a ULSB bundle")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if crc32c(body) != crc:
        raise BundleError("checksum mismatch: bundle is corrupt")
    rd = _Reader(body)
    rd.take(4)
    version, count = rd.unpack("<IQ")
    if version != VERSION:
        raise BundleError(f"unsupported bundle version {version}")
    records = []
    for _ in range(count):
        case_id, patient_id = rd.string(), rd.string()
        slice_index, h, w = rd.unpack("<III")
        image = np.frombuffer(rd.take(h * w), dtype=np.uint8).reshape(h, w).copy()
        bits = np.frombuffer(rd.take((h * w + 7) // 8), dtype=np.uint8)
        label = np.unpackbits(bits, count=h * w).reshape(h, w)
        records.append(SliceRecord(image, label, case_id, patient_id, slice_index))
    (npat,) = rd.unpack("<I")
    index: dict[str, list[tuple[int, int]]] = {}
    seen = np.zeros(count, dtype=int)
    for _ in range(npat):
        pid = rd.string()
        (nruns,) = rd.unpack("<I")
        runs = [rd.unpack("<QQ") for _ in range(nruns)]
        for s, n in runs:
            if s + n > count:
                raise BundleError("patient index points past the record list")
            seen[s : s + n] += 1
            if any(records[i].patient_id != pid for i in range(s, s + n)):
                raise BundleError(f"patient index for {pid!r} covers foreign records")
        index[pid] = [(int(s), int(n)) for s, n in runs]
    if rd.pos != len(body):
        raise BundleError("trailing bytes after patient index")
    if (seen != 1).any():
        raise BundleError("patient index does not cover every record exactly once")
    return DatasetBundle(records, index, version)


def write_bundle(records, path) -> None:
    blob = encode_bundle(records)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_bundle(path) -> DatasetBundle:
    return decode_bundle(Path(path).read_bytes())
