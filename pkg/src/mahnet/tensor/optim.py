"""SGD and Adam."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(kind: str, params, grads, hyper, state: dict | None = None) -> list[np.ndarray]:
    """Functional update: return new parameter arrays.

    ``hyper`` is a float learning rate for SGD or an :class:`AdamHyper`.
    Adam keeps its moments in ``state`` (created when ``None``/empty).
    """
    lr = hyper if kind == "sgd" else hyper.lr
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    if kind == "sgd":
        return [p - lr * g for p, g in zip(params, grads)]
    if kind != "adam":
        raise ValueError(f"unknown optimizer {kind!r}")
    if state is None:
        state = {}
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state["m"][i] = hyper.beta1 * state["m"][i] + (1 - hyper.beta1) * g
        v = state["v"][i] = hyper.beta2 * state["v"][i] + (1 - hyper.beta2) * g * g
        mhat = m / (1 - hyper.beta1**t)
        vhat = v / (1 - hyper.beta2**t)
        out.append(p - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps))
    return out


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """In-place Adam over a fixed, ordered parameter list."""

    def __init__(self, params: list[Tensor], hyper: AdamHyper):
        if hyper.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {hyper.lr}")
        self.params, self.hyper = params, hyper
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        h = self.hyper
        self.t += 1
        c1 = 1 - h.beta1**self.t
        c2 = 1 - h.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= h.beta1
            m += (1 - h.beta1) * g
            v *= h.beta2
            v += (1 - h.beta2) * g * g
            p.data -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"optim.m.{i}"] = m
            out[f"optim.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["optim.t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"optim.m.{i}"]
            self.v[i][...] = arrays[f"optim.v.{i}"]
