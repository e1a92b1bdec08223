"""Linear state-space models: discretization, scans, kernels and convolution.

These are plain numpy routines over explicit parameter structs. The
differentiable layer used inside the network lives in :mod:`.layer`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor.fft import fft_real, ifft_real, next_pow2


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ContinuousSSM:
    A: np.ndarray  # (n, n)
    B: np.ndarray  # (n, 1)
    C: np.ndarray  # (1, n)
    D: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=np.float64).reshape(n, 1)
        C = np.asarray(self.C, dtype=np.float64).reshape(1, n)
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", float(self.D))

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSSM:
    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray
    delta: float
    D: float = 0.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"step size must be positive, got {self.delta}")

    @property
    def n(self) -> int:
        return self.Abar.shape[0]


@dataclass(frozen=True)
class SSMKernel:
    k: np.ndarray

    @property
    def length(self) -> int:
        return self.k.shape[0]


def hippo_legs(n: int) -> np.ndarray:
    """HiPPO-LegS state matrix (lower triangular, negative diagonal)."""
    if n < 1:
        raise ValueError(f"state dimension must be >= 1, got {n}")
    q = np.sqrt(2.0 * np.arange(n) + 1.0)
    A = -np.tril(np.outer(q, q), -1)
    A[np.diag_indices(n)] = -(np.arange(n) + 1.0)
    return A


def discretize_bilinear(ssm: ContinuousSSM, delta: float) -> DiscreteSSM:
    """Bilinear (Tustin) map from (A, B) to (Abar, Bbar) at step ``delta``."""
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    n = ssm.n
    eye = np.eye(n)
    left = eye - (delta / 2.0) * ssm.A
    try:
        if np.linalg.cond(left) > 1e14:
            raise np.linalg.LinAlgError
        Abar = np.linalg.solve(left, eye + (delta / 2.0) * ssm.A)
        Bbar = np.linalg.solve(left, delta * ssm.B)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"(I - delta/2 A) is singular at delta={delta}") from None
    return DiscreteSSM(Abar, Bbar, ssm.C.copy(), float(delta), ssm.D)


def _step(Abar: np.ndarray, Bbar: np.ndarray, x: np.ndarray, u: float) -> np.ndarray:
    return Abar @ x + Bbar[:, 0] * u


def scan_recurrent(dssm: DiscreteSSM, u, x_init=None) -> np.ndarray:
    """Run ``x_k = Abar x_{k-1} + Bbar u_k``, ``y_k = Cbar x_k + D u_k``."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size < 1:
        raise ValueError("input must be a non-empty 1-D sequence")
    x = np.zeros(dssm.n) if x_init is None else np.asarray(x_init, dtype=np.float64).copy()
    c = dssm.Cbar[0]
    y = np.empty_like(u)
    for k, uk in enumerate(u):
        x = _step(dssm.Abar, dssm.Bbar, x, uk)
        y[k] = c @ x + dssm.D * uk
    return y


def ssm_kernel(dssm: DiscreteSSM, L: int) -> SSMKernel:
    """Kernel ``k[i] = Cbar Abar^i Bbar`` by propagating a state vector."""
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    state = dssm.Bbar[:, 0].copy()
    c = dssm.Cbar[0]
    k = np.empty(L)
    for i in range(L):
        k[i] = c @ state
        state = dssm.Abar @ state
    return SSMKernel(k)


def convolve_causal(kernel, u, method: str = "fft") -> np.ndarray:
    """Causal (non-circular) convolution ``y_k = sum_{j<=k} kernel[j] u[k-j]``."""
    k = np.asarray(kernel.k if isinstance(kernel, SSMKernel) else kernel, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if k.shape[-1] != u.shape[-1]:
        raise ValueError(f"kernel length {k.shape[-1]} != input length {u.shape[-1]}")
    L = u.shape[-1]
    if method == "direct":
        y = np.zeros(np.broadcast_shapes(k.shape, u.shape))
        for j in range(L):
            y[..., j:] += k[..., j : j + 1] * u[..., : L - j]
        return y
    if method != "fft":
        raise ValueError(f"unknown method {method!r}")
    m = next_pow2(2 * L - 1)
    ku = fft_real(_pad(k, m)) * fft_real(_pad(u, m))
    return ifft_real(ku, m)[..., :L]


def _pad(x: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (m,))
    out[..., : x.shape[-1]] = x
    return out


def ssm_apply(dssm: DiscreteSSM, u, method: str = "fft") -> np.ndarray:
    """Convolutional-mode output including the ``D u`` skip term."""
    u = np.asarray(u, dtype=np.float64)
    return convolve_causal(ssm_kernel(dssm, u.shape[-1]), u, method) + dssm.D * u


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def random_stable_ssm(rng: np.random.Generator, n: int, D: float = 0.0) -> ContinuousSSM:
    """Random Hurwitz system: a random matrix shifted left of its spectral abscissa."""
    M = rng.standard_normal((n, n)) / np.sqrt(n)
    shift = np.max(np.linalg.eigvals(M).real) + rng.uniform(0.1, 1.0)
    A = M - shift * np.eye(n)
    return ContinuousSSM(A, rng.standard_normal((n, 1)), rng.standard_normal((1, n)), D)


# ---------------------------------------------------------------------------
# input-dependent (selective) scan


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


@dataclass
class SelectiveParams:
    """Input-to-parameter maps for the selective scan over ``d`` channels.

    ``delta_t = softplus(u_t @ w_delta + b_delta)`` (per channel),
    ``B_t = u_t @ w_b + b_b`` and ``C_t = u_t @ w_c + b_c`` (shared across
    channels, length ``n``).
    """

    w_delta: np.ndarray  # (d, d)
    b_delta: np.ndarray  # (d,)
    w_b: np.ndarray  # (d, n)
    b_b: np.ndarray  # (n,)
    w_c: np.ndarray  # (d, n)
    b_c: np.ndarray  # (n,)
    D: np.ndarray | float = 0.0

    @classmethod
    def constant(cls, d: int, n: int, delta: float, B, C, D=0.0) -> "SelectiveParams":
        """Parameters whose projections ignore the input (the LTI special case)."""
        b_delta = np.full(d, np.log(np.expm1(delta)))
        return cls(
            np.zeros((d, d)), b_delta, np.zeros((d, n)), np.asarray(B, float).reshape(n),
            np.zeros((d, n)), np.asarray(C, float).reshape(n), D,
        )

    def project(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        delta = _softplus(u @ self.w_delta + self.b_delta)
        return delta, u @ self.w_b + self.b_b, u @ self.w_c + self.b_c


def selective_scan(params: SelectiveParams, A: np.ndarray, u) -> np.ndarray:
    """Selective scan over ``u`` of shape (L, d); returns y of shape (L, d).

    Each step and channel discretizes (A, B_t) with its own delta using the
    bilinear rule, so constant parameters reproduce the LTI recurrence.
    Runtime is linear in L.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    L, d = u.shape
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    delta, Bt, Ct = params.project(u)
    if not (delta > 0).all():
        raise ValueError("selective step sizes must be positive")
    Dskip = np.broadcast_to(np.asarray(params.D, dtype=np.float64), (d,))
    x = np.zeros((d, n))
    y = np.empty((L, d))
    for t in range(L):
        for c in range(d):
            disc = discretize_bilinear(ContinuousSSM(A, Bt[t][:, None], Ct[t][None, :]), float(delta[t, c]))
            x[c] = _step(disc.Abar, disc.Bbar, x[c], u[t, c])
            y[t, c] = disc.Cbar[0] @ x[c] + Dskip[c] * u[t, c]
    return y
