"""Discrete Fourier transforms along the last axis.

Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform.
Any other length goes through Bluestein's chirp-z algorithm, which pads to a
power of two internally, so every transform is an exact n-point DFT.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


@lru_cache(maxsize=64)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=256)
def _twiddle(m: int, sign: int) -> np.ndarray:
    k = np.arange(m // 2)
    return np.exp(sign * 2j * np.pi * k / m)


def _radix2(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128, copy=True)
    lead = x.shape[:-1]
    a = np.asarray(x, dtype=np.complex128)[..., _bitrev(n)]
    m = 2
    while m <= n:
        blocks = a.reshape(*lead, n // m, 2, m // 2)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * _twiddle(m, sign)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return a


@lru_cache(maxsize=64)
def _chirp(n: int, sign: int) -> tuple[np.ndarray, np.ndarray, int]:
    k = np.arange(n)
    # k^2 mod 2n keeps the phase argument small and exact
    w = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    m = next_pow2(2 * n - 1)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(w)
    b[m - n + 1 :] = np.conj(w[1:][::-1])
    return w, _radix2(b, -1), m


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    w, fb, m = _chirp(n, sign)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * w
    conv = _radix2(_radix2(a, -1) * fb, +1) / m
    return conv[..., :n] * w


def _dft(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    if n < 1:
        raise ValueError("transform length must be >= 1")
    if _is_pow2(n):
        return _radix2(x, sign)
    return _bluestein(x, sign)


def fft(x) -> np.ndarray:
    """Forward complex DFT, ``X[k] = sum_j x[j] exp(-2 pi i jk / n)``."""
    return _dft(np.asarray(x), -1)


def ifft(spectrum) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    return _dft(spectrum, +1) / spectrum.shape[-1]


def fft_real(x) -> np.ndarray:
    """Spectrum of a real sequence: the ``n // 2 + 1`` non-redundant bins.

    Even lengths pack the samples into a half-length complex sequence and
    unzip the result, halving the transform work.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("transform length must be >= 1")
    if n % 2 or n == 2:
        return fft(x)[..., : n // 2 + 1]
    half = n // 2
    z = fft(x[..., 0::2] + 1j * x[..., 1::2])
    k = np.arange(half + 1)
    zk = z[..., k % half]
    zc = np.conj(z[..., (-k) % half])
    even = 0.5 * (zk + zc)
    odd = -0.5j * (zk - zc)
    return even + np.exp(-2j * np.pi * k / n) * odd


def ifft_real(spectrum, n: int) -> np.ndarray:
    """Inverse of :func:`fft_real` for a length-``n`` real sequence."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    bins = n // 2 + 1
    if spectrum.shape[-1] < bins:
        raise ValueError(f"need {bins} spectral bins for length {n}, got {spectrum.shape[-1]}")
    spec = spectrum[..., :bins]
    full = np.empty(spec.shape[:-1] + (n,), dtype=np.complex128)
    full[..., :bins] = spec
    tail = n - bins
    if tail > 0:
        full[..., bins:] = np.conj(spec[..., 1 : tail + 1][..., ::-1])
    return ifft(full).real
