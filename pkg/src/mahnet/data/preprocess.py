"""Volume directories -> slice records."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import SliceRecord
from .imaging import extract_slices, resize_label, resize_lanczos
from .nifti import NiftiError, read_volume
from .pairing import DEFAULT_ID_PATTERN, DEFAULT_PATIENT_PATTERN, pair_by_identifier, patient_of


@dataclass
class PreprocessSummary:
    volumes: int = 0
    slices: int = 0
    patients: int = 0
    unmatched: list[str] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "volumes": self.volumes,
            "slices": self.slices,
            "patients": self.patients,
            "unmatched": self.unmatched,
            "errors": self.errors,
        }


def volume_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.is_file() and p.name.lower().endswith(".nii"))


def process_pair(case_id: str, image_path, label_path, size: int, patient_pattern: str) -> list[SliceRecord]:
    vol = read_volume(image_path)
    lab = read_volume(label_path)
    if vol.dims != lab.dims:
        raise NiftiError(f"image dims {vol.dims} != label dims {lab.dims}")
    pid = patient_of(case_id, patient_pattern)
    out = []
    for z, img in enumerate(extract_slices(vol)):
        mask = (lab.data[:, :, z].T > 0).astype(np.uint8)
        out.append(SliceRecord(resize_lanczos(img, size, size), resize_label(mask, size, size), case_id, pid, z))
    return out


def preprocess_dirs(image_dir, label_dir, size: int = 256, id_pattern: str = DEFAULT_ID_PATTERN,
                    patient_pattern: str = DEFAULT_PATIENT_PATTERN) -> tuple[list[SliceRecord], PreprocessSummary]:
    """Pair, read, normalize and resize every volume; per-file errors are collected."""
    pairing = pair_by_identifier(volume_files(image_dir), volume_files(label_dir), id_pattern)
    summary = PreprocessSummary(unmatched=[str(p) for p in pairing.unmatched])
    records: list[SliceRecord] = []
    for case_id, ip, lp in pairing.pairs:
        try:
            recs = process_pair(case_id, ip, lp, size, patient_pattern)
        except (NiftiError, OSError, ValueError) as exc:
            summary.errors.append({"file": str(ip), "error": str(exc)})
            continue
        records.extend(recs)
        summary.volumes += 1
    summary.slices = len(records)
    summary.patients = len({r.patient_id for r in records})
    return records, summary
