"""Differentiable SSM layer used by the vision state-space module.

The network's state matrix is diagonal per channel and initialized with the
HiPPO-LegS spectrum (``-(i+1)``), which keeps bilinear discretization
elementwise. Two modes:

* ``selective``: delta, B and C are linear maps of the input, scanned
  recurrently by :func:`selective_scan_diag`.
* ``lti``: fixed parameters; the kernel is materialized with
  :func:`ssm_kernel_diag` and applied with the FFT :func:`causal_conv`.
"""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor, absolute, as_tensor, exp, neg, softplus
from ..tensor.fft import fft_real, ifft_real, next_pow2
from ..tensor.nn import Linear, Module
from ..tensor.tensor import make_result

MODES = ("selective", "lti")


def _bilinear_diag(delta: np.ndarray, A: np.ndarray):
    half = delta * A / 2.0
    den = 1.0 - half
    return half, den, (1.0 + half) / den, delta / den


def selective_scan_diag(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Selective scan with diagonal per-channel state matrices.

    Shapes: ``u, delta`` (N, L, D); ``A`` (D, n), entries < 0; ``B, C``
    (N, L, n). Returns y (N, L, D) with ``y_t = C_t . x_t`` and
    ``x_t = Abar_t x_{t-1} + Bbar_t u_t`` discretized bilinearly per step.
    """
    u, delta, A, B, C = (as_tensor(t) for t in (u, delta, A, B, C))
    if (delta.data <= 0).any():
        raise ValueError("selective step sizes must be positive")
    N, L, D = u.shape
    n = A.shape[1]
    # time-major copies so each recurrence step reads contiguous memory
    ut = u.data.transpose(1, 0, 2)
    dt = delta.data.transpose(1, 0, 2)[..., None]
    Bt = B.data.transpose(1, 0, 2)[:, :, None, :]
    Ct = C.data.transpose(1, 0, 2)
    half, den, abar, bfac = _bilinear_diag(dt, A.data)
    bbar = bfac * Bt
    drive = bbar * ut[..., None]
    xs = np.empty((L, N, D, n), dtype=u.dtype)
    x = np.zeros((N, D, n), dtype=u.dtype)
    for t in range(L):
        x = abar[t] * x + drive[t]
        xs[t] = x
    y = np.einsum("lbdn,lbn->lbd", xs, Ct)

    def back(g):
        gt = g.transpose(1, 0, 2)
        gC = np.einsum("lbd,lbdn->lbn", gt, xs)
        # adjoint recurrence h_t = dy_t C_t + abar_{t+1} h_{t+1}
        H = np.empty_like(xs)
        h = np.zeros((N, D, n), dtype=g.dtype)
        for t in range(L - 1, -1, -1):
            if t + 1 < L:
                h *= abar[t + 1]
            h += gt[t][:, :, None] * Ct[t][:, None, :]
            H[t] = h
        gu = np.einsum("lbdn,lbdn->lbd", H, bbar)
        gbfac = H * ut[..., None]
        gB = np.einsum("lbdn,lbdn->lbn", gbfac, bfac)
        gbfac *= Bt
        # d abar / d half = 2 / den^2, d bfac / d half = delta / den^2
        ghalf = np.empty_like(H)
        ghalf[0] = 0.0
        np.multiply(H[1:], xs[:-1], out=ghalf[1:])
        ghalf *= 2.0
        ghalf += gbfac * dt
        ghalf /= den
        ghalf /= den
        gbfac /= den
        gdelta = np.einsum("lbdn,dn->lbd", ghalf, A.data) * 0.5 + gbfac.sum(-1)
        gA = np.einsum("lbdn,lbd->dn", ghalf, dt[..., 0]) * 0.5
        back_t = lambda arr: np.ascontiguousarray(arr.transpose(1, 0, 2))
        return back_t(gu), back_t(gdelta), gA, back_t(gB), back_t(gC)

    return make_result(np.ascontiguousarray(y.transpose(1, 0, 2)), (u, delta, A, B, C), back, "selective_scan")


def ssm_kernel_diag(abar: Tensor, bbar: Tensor, C: Tensor, L: int) -> Tensor:
    """Per-channel kernel ``K[d, l] = sum_i C[d,i] bbar[d,i] abar[d,i]^l``.

    Powers come from a running product (state propagation), not ``**``.
    """
    abar, bbar, C = as_tensor(abar), as_tensor(bbar), as_tensor(C)
    D, n = abar.shape
    P = np.empty((D, n, L), dtype=abar.dtype)
    P[..., 0] = 1.0
    for l in range(1, L):
        P[..., l] = P[..., l - 1] * abar.data
    cb = C.data * bbar.data
    K = np.einsum("dn,dnl->dl", cb, P)

    def back(g):
        gP = np.einsum("dl,dnl->dn", g, P)
        # d/d abar of abar^l is l * abar^(l-1)
        lP = np.zeros_like(P)
        lP[..., 1:] = P[..., :-1] * np.arange(1, L)
        gab = cb * np.einsum("dl,dnl->dn", g, lP)
        return gab, gP * C.data, gP * bbar.data

    return make_result(K, (abar, bbar, C), back, "ssm_kernel_diag")


def _fft_conv(a: np.ndarray, b: np.ndarray, L: int) -> np.ndarray:
    m = next_pow2(2 * L - 1)
    fa = fft_real(_zero_pad(a, m))
    fb = fft_real(_zero_pad(b, m))
    return ifft_real(fa * fb, m)[..., :L]


def _zero_pad(x: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (m,), dtype=np.float64)
    out[..., : x.shape[-1]] = x
    return out


def causal_conv(u: Tensor, K: Tensor) -> Tensor:
    """FFT causal convolution of ``u`` (N, L, D) with per-channel ``K`` (D, L)."""
    u, K = as_tensor(u), as_tensor(K)
    N, L, D = u.shape
    if K.shape != (D, L):
        raise ValueError(f"kernel shape {K.shape} != {(D, L)}")
    uc = u.data.transpose(0, 2, 1)  # (N, D, L)
    y = _fft_conv(uc, K.data[None], L).astype(u.dtype)

    def back(g):
        gc = g.transpose(0, 2, 1)
        gu = _fft_conv(gc[..., ::-1], K.data[None], L)[..., ::-1]
        m = next_pow2(2 * L - 1)
        corr = ifft_real(np.conj(fft_real(_zero_pad(uc, m))) * fft_real(_zero_pad(gc, m)), m)[..., :L]
        return np.ascontiguousarray(gu.transpose(0, 2, 1)), corr.sum(axis=0)

    return make_result(np.ascontiguousarray(y.transpose(0, 2, 1)), (u, K), back, "causal_conv")


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SSM(Module):
    """Channel-wise SSM over sequences (N, L, D) with state size ``n``.

    Parameters are named ``A, B, C, D, log_delta`` (lti) or ``A, D`` plus
    ``dt_proj``, ``B_proj``, ``C_proj`` (selective). ``A`` holds the diagonal
    state matrix; the forward pass uses ``-|A|`` so it stays Hurwitz.
    """

    def __init__(self, d: int, n: int, rng: np.random.Generator, mode: str = "selective",
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown SSM mode {mode!r}")
        if n < 1:
            raise ValueError("state dimension must be >= 1")
        self.mode, self.d, self.n = mode, d, n
        self.A = self.param("A", -np.tile(np.arange(1.0, n + 1.0), (d, 1)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d))
        if mode == "lti":
            self.B = self.param("B", np.ones((d, n)))
            self.C = self.param("C", rng.standard_normal((d, n)) / np.sqrt(n))
            self.log_delta = self.param("log_delta", np.log(dt))
        else:
            self.dt_proj = self.child("dt_proj", Linear(d, d, rng))
            self.dt_proj.w.data *= 0.1
            self.dt_proj.b.data[...] = _inv_softplus(dt)
            self.B_proj = self.child("B_proj", Linear(d, n, rng))
            self.C_proj = self.child("C_proj", Linear(d, n, rng))
        self.D = self.param("D", np.zeros(d))

    def state_matrix(self) -> Tensor:
        return neg(absolute(self.A))

    def forward(self, u: Tensor) -> Tensor:
        A = self.state_matrix()
        if self.mode == "selective":
            delta = softplus(self.dt_proj(u))
            y = selective_scan_diag(u, delta, A, self.B_proj(u), self.C_proj(u))
        else:
            delta = exp(self.log_delta).reshape(self.d, 1)
            half = delta * A * 0.5
            den = 1.0 - half
            abar = (1.0 + half) / den
            bbar = delta / den * self.B
            K = ssm_kernel_diag(abar, bbar, self.C, u.shape[1])
            y = causal_conv(u, K)
        return y + u * self.D
