"""Synthetic lesion slices for desk-scale training and tests."""
from __future__ import annotations

import numpy as np

from .bundle import DatasetBundle, SliceRecord
from .imaging import round_half_up

KINDS = ("disk", "ellipse", "blob")


def _support(kind: str, rng: np.random.Generator, size: int, area: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r0 = np.sqrt(area / np.pi)
    if kind == "ellipse":
        ratio = rng.uniform(0.5, 1.0)
        a, b = r0 / np.sqrt(ratio), r0 * np.sqrt(ratio)
    else:
        a = b = r0
    reach = max(a, b) * (1.3 if kind == "blob" else 1.0) + 1.0
    lo, hi = min(reach, size / 2 - 0.5), max(size - 1 - reach, size / 2 - 0.5)
    cy, cx = rng.uniform(lo, hi, size=2)
    dy, dx = yy - cy, xx - cx
    theta = rng.uniform(0, np.pi)
    if kind == "disk":
        mask = dy**2 + dx**2 <= r0**2
    elif kind == "ellipse":
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif kind == "blob":
        # star-shaped contour with a few low-order harmonics
        ang = np.arctan2(dy, dx)
        radius = np.full_like(ang, r0)
        for k in (2, 3, 5):
            radius += r0 * rng.uniform(0, 0.12) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        mask = np.hypot(dy, dx) <= radius
    else:
        raise ValueError(f"unknown lesion kind {kind!r}; expected one of {KINDS}")
    if not mask.any():
        mask[int(round(cy)), int(round(cx))] = True
    return mask


def synth_slice(rng: np.random.Generator, size: int, kind: str, contrast: float = 0.35,
                noise: float = 0.04) -> tuple[np.ndarray, np.ndarray]:
    area = np.exp(rng.uniform(np.log(4.0), np.log(0.1 * size * size)))
    mask = _support(kind, rng, size, area)
    base = rng.uniform(0.15, 0.35)
    eps = rng.normal(0.0, noise, size=(size, size))
    # zero-mean noise inside and outside the lesion keeps the contrast exact
    for region in (mask, ~mask):
        if region.any():
            eps[region] -= eps[region].mean()
    img = base + eps + contrast * mask
    img = round_half_up(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img, mask.astype(np.uint8)


def synth_dataset(seed: int, n_cases: int, size: int = 64, lesion_kind: str = "disk",
                  contrast: float = 0.35, noise: float = 0.04, slices_per_patient: int = 4) -> DatasetBundle:
    """Deterministic bundle of ``n_cases`` slices, one lesion each.

    Lesion areas are log-uniform between 4 pixels and 10% of the image.
    ``lesion_kind`` may also be "mixed" to cycle through all kinds.
    """
    if size < 16:
        raise ValueError("synthetic images need size >= 16")
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if lesion_kind not in KINDS + ("mixed",):
        raise ValueError(f"unknown lesion kind {lesion_kind!r}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_cases):
        kind = KINDS[i % len(KINDS)] if lesion_kind == "mixed" else lesion_kind
        img, lab = synth_slice(rng, size, kind, contrast, noise)
        records.append(SliceRecord(img, lab, f"syn{i:04d}", f"pat{i // slices_per_patient:03d}",
                                   i % slices_per_patient))
    return DatasetBundle(records)
