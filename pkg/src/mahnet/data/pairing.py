"""Filename-identifier pairing of image and label files."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

# everything before the first "_" (or the whole stem when there is none)
DEFAULT_ID_PATTERN = r"^([^_]+)"
# patient id: identifier with a trailing "-<digits>" study/series suffix removed
DEFAULT_PATIENT_PATTERN = r"^(.+?)(?:-\d+)?$"


class PairingError(ValueError):
    pass


def _stem(path) -> str:
    name = Path(path).name
    for ext in (".nii.gz", ".nii", ".png"):
        if name.lower().endswith(ext):
            return name[: -len(ext)]
    return Path(name).stem


def identifier(path, pattern: str = DEFAULT_ID_PATTERN) -> str:
    m = re.search(pattern, _stem(path))
    if not m:
        raise PairingError(f"no identifier in {Path(path).name!r} for pattern {pattern!r}")
    return m.group(1) if m.groups() else m.group(0)


def patient_of(ident: str, pattern: str = DEFAULT_PATIENT_PATTERN) -> str:
    m = re.search(pattern, ident)
    return (m.group(1) if m.groups() else m.group(0)) if m else ident


@dataclass
class PairingResult:
    pairs: list[tuple[str, Path, Path]] = field(default_factory=list)
    unmatched_images: list[Path] = field(default_factory=list)
    unmatched_labels: list[Path] = field(default_factory=list)

    @property
    def unmatched(self) -> list[Path]:
        return self.unmatched_images + self.unmatched_labels


def _by_id(paths, pattern: str, side: str) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for p in paths:
        p = Path(p)
        key = identifier(p, pattern)
        if key in out:
            raise PairingError(f"duplicate identifier {key!r} among {side}: {out[key].name}, {p.name}")
        out[key] = p
    return out


def pair_by_identifier(image_paths, label_paths, pattern: str = DEFAULT_ID_PATTERN) -> PairingResult:
    """Pair files sharing an identifier; unmatched files are reported."""
    imgs = _by_id(image_paths, pattern, "images")
    labs = _by_id(label_paths, pattern, "labels")
    res = PairingResult()
    for key in sorted(imgs):
        if key in labs:
            res.pairs.append((key, imgs[key], labs[key]))
        else:
            res.unmatched_images.append(imgs[key])
    res.unmatched_labels = [labs[k] for k in sorted(labs) if k not in imgs]
    return res
