"""Parameter containers and the basic layers built on :mod:`.ops`."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Named tree of parameters, running-stat buffers and child modules.

    Children and parameters are registered explicitly, so names in a state
    dict follow registration order and never depend on attribute iteration.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in own.items():
            if name not in state:
                continue
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = self.param("w", he_uniform(rng, (cin, cout), cin))
        self.b = self.param("b", np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class Conv2d(Module):
    """Convolution layer; ``mode`` as in :func:`ops.convolve2d`."""

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        mode: str = "standard",
        bias: bool = True,
        padding: str = "same",
    ):
        super().__init__()
        self.stride, self.mode, self.padding = stride, mode, padding
        if mode == "depthwise":
            if cin != cout:
                raise ValueError("depthwise convolution needs cin == cout")
            shape, fan_in = (k, k, cin, 1), k * k
        else:
            shape, fan_in = (k, k, cin, cout), k * k * cin
        self.w = self.param("w", he_uniform(rng, shape, fan_in))
        self.b = self.param("b", np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.convolve2d(x, self.w, self.b, self.stride, self.padding, self.mode)


class BatchNorm(Module):
    """Per-channel batch normalization with exponential running statistics.

    ``identity`` is a test hook: when set, the layer passes input through.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.stats = ops.RunningStats(
            self.buffer("running_mean", np.zeros(channels)),
            self.buffer("running_var", np.ones(channels)),
            momentum,
        )
        self.identity = False

    def forward(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        return ops.normalize("batch", x, self.gamma, self.beta, self.eps, self.stats, self.training)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.normalize("layer", x, self.gamma, self.beta, self.eps)
