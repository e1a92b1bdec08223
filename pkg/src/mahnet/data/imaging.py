"""Slice normalization, Lanczos-3 resampling and grayscale PNG helpers."""
from __future__ import annotations

import io

import numpy as np
from PIL import Image

LANCZOS_A = 3


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def normalize_slice(sl: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1] then quantize to uint8; constant slices become zeros."""
    sl = np.asarray(sl, dtype=np.float64)
    lo, hi = sl.min(), sl.max()
    if hi == lo:
        return np.zeros(sl.shape, dtype=np.uint8)
    return round_half_up((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)


def extract_slices(vol) -> list[np.ndarray]:
    """Axial slices of an (X, Y, Z) volume as (Y, X) uint8 images."""
    data = vol if isinstance(vol, np.ndarray) else getattr(vol, "data", vol)
    data = np.asarray(data)
    return [normalize_slice(data[:, :, z].T) for z in range(data.shape[2])]


def lanczos_kernel(x: np.ndarray, a: int = LANCZOS_A) -> np.ndarray:
    """sinc(x) sinc(x/a) on |x| < a, exactly 0 at nonzero integers."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)
    ints = (x != 0) & (x == np.round(x))
    out[ints] = 0.0
    return out


def resample_weights(n_in: int, n_out: int, a: int = LANCZOS_A) -> np.ndarray:
    """(n_out, n_in) weight matrix; rows sum to 1.

    Pixel centers are aligned (``src = (i + 0.5) * n_in / n_out - 0.5``).
    When shrinking, the kernel is stretched by the scale so it also acts as
    the antialiasing filter. Taps outside the image are dropped and the
    remaining weights renormalized.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("extents must be >= 1")
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    j = np.arange(n_in)
    W = lanczos_kernel((j[None, :] - src[:, None]) / stretch, a)
    sums = W.sum(axis=1, keepdims=True)
    empty = sums[:, 0] == 0
    if empty.any():  # degenerate: fall back to nearest sample
        W[empty] = 0.0
        W[empty, np.clip(np.round(src[empty]).astype(int), 0, n_in - 1)] = 1.0
        sums = W.sum(axis=1, keepdims=True)
    return W / sums


def resize_lanczos(img: np.ndarray, out_h: int = 256, out_w: int = 256) -> np.ndarray:
    """Separable Lanczos-3 resize, clamped to [0, 255].

    uint8 input gives uint8 output (rounded half up); float input stays float.
    """
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError("expected a non-empty 2-D image")
    h, w = img.shape
    out = img.astype(np.float64)
    if out_h != h:
        out = resample_weights(h, out_h) @ out
    if out_w != w:
        out = out @ resample_weights(w, out_w).T
    out = np.clip(out, 0.0, 255.0)
    if img.dtype == np.uint8:
        return round_half_up(out).astype(np.uint8)
    return out


def resize_label(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a binary mask through the image path, re-thresholded at mid-gray."""
    lab = (np.asarray(label) > 0).astype(np.uint8) * 255
    return (resize_lanczos(lab, out_h, out_w) >= 128).astype(np.uint8)


def encode_png(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim not in (2, 3):
        raise ValueError("PNG export needs uint8 grayscale or RGB")
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(blob: bytes) -> np.ndarray:
    """Decode to an 8-bit grayscale array (color images are converted)."""
    with Image.open(io.BytesIO(blob)) as im:
        im.load()
        if im.mode not in ("L",):
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def overlay(img: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB view of ``img`` with the mask tinted red."""
    rgb = np.repeat(np.asarray(img, dtype=np.float64)[..., None], 3, axis=2)
    m = np.asarray(mask).astype(bool)
    rgb[m] = (1 - alpha) * rgb[m] + alpha * np.array([255.0, 0.0, 0.0])
    return round_half_up(rgb).astype(np.uint8)
