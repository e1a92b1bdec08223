"""Central finite-difference checks for taped functions.

Piecewise-linear ops (ReLU, max pooling) make a stencil that straddles a
kink disagree with the one-sided derivative the tape reports. ``refine``
retries a failing check with the step shrunk tenfold each time; a wrong
gradient fails at every step, so this only removes kink artifacts.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

FD_STEP = 1e-5
REFINE_TOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def analytic_grads(fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]


def numeric_grads(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = FD_STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Coordinate-wise central differences.

    Returns (gradients, masks); when ``max_entries`` is set only a random
    subset of coordinates per tensor is probed and the mask marks them.
    """
    grads, masks = [], []
    for t in wrt:
        g = np.zeros_like(t.data)
        mask = np.zeros(t.shape, dtype=bool)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = fn().item()
            flat[i] = old - h
            fm = fn().item()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
            mask.reshape(-1)[i] = True
        grads.append(g)
        masks.append(mask)
    return grads, masks


def check_gradients(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = FD_STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    refine: int = 0,
) -> float:
    """Worst relative error between taped and finite-difference gradients."""
    ana = analytic_grads(fn, wrt)
    seed = None if rng is None else int(rng.integers(1 << 31))
    best = np.inf
    for _ in range(refine + 1):
        # the same coordinates are probed at every step size
        sub = None if seed is None else np.random.default_rng(seed)
        num, masks = numeric_grads(fn, wrt, h, max_entries, sub)
        err = max(relative_error(a[m], n[m]) for a, n, m in zip(ana, num, masks))
        best = min(best, err)
        if best <= REFINE_TOL:
            break
        h /= 10.0
    return best


def _directional_fd(fn, wrt, vs, h: float) -> float:
    olds = [t.data.copy() for t in wrt]
    try:
        for t, v, o in zip(wrt, vs, olds):
            t.data[...] = o + h * v
        fp = fn().item()
        for t, v, o in zip(wrt, vs, olds):
            t.data[...] = o - h * v
        fm = fn().item()
    finally:
        for t, o in zip(wrt, olds):
            t.data[...] = o
    return (fp - fm) / (2 * h)


def check_directional(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    rng: np.random.Generator,
    directions: int = 3,
    h: float = FD_STEP,
    refine: int = 0,
) -> float:
    """Compare <grad, v> with a central difference along random unit ``v``.

    Cheap for models with many parameters: two forward passes per direction.
    """
    ana = analytic_grads(fn, wrt)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(t.shape) for t in wrt]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        an = sum(float((a * v).sum()) for a, v in zip(ana, vs))
        best, step = np.inf, h
        for _ in range(refine + 1):
            num = _directional_fd(fn, wrt, vs, step)
            best = min(best, abs(an - num) / max(abs(an), abs(num), 1e-12))
            if best <= REFINE_TOL:
                break
            step /= 10.0
        worst = max(worst, best)
    return worst
