"""Encoder/decoder building blocks of AHNet.

Convolutions directly followed by batch norm carry no bias.
"""
from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor, as_tensor, clip, concat_channels, crop_center, crop_offsets, mul, pool_max2d, relu, sigmoid, softmax_channel,
)
from .tensor.nn import BatchNorm, Conv2d, Module

# float64 sigmoid rounds to exactly 1.0 above ~36.7; at +-30 the rate stays
# strictly inside (0, 1) and the clipped tail has gradient below 1e-13
RATE_LOGIT_BOUND = 30.0


class AttentionGate(Module):
    """Additive attention gate producing a per-pixel rate in (0, 1).

    ``g`` is center-cropped to ``x``'s spatial size, both are projected to
    ``c`` channels by 1x1 conv + BN, summed, passed through ReLU, projected to
    one channel (1x1 conv + BN) and squashed by a sigmoid whose argument is
    bounded to +-RATE_LOGIT_BOUND. The output is ``x * rate``.

    ``force_open`` is a test hook that pins the rate to 1.
    """

    def __init__(self, cx: int, cg: int, c: int, rng: np.random.Generator, momentum: float = 0.9):
        super().__init__()
        if c < 1:
            raise ValueError("gate width must be >= 1")
        self.theta = self.child("theta", Conv2d(cx, c, 1, rng, bias=False))
        self.theta_bn = self.child("theta_bn", BatchNorm(c, momentum))
        self.phi = self.child("phi", Conv2d(cg, c, 1, rng, bias=False))
        self.phi_bn = self.child("phi_bn", BatchNorm(c, momentum))
        self.psi = self.child("psi", Conv2d(c, 1, 1, rng, bias=False))
        self.psi_bn = self.child("psi_bn", BatchNorm(1, momentum))
        self.force_open = False
        self.record_rate = True
        self.last_rate: np.ndarray | None = None

    def rate(self, x: Tensor, g: Tensor) -> Tensor:
        x, g = as_tensor(x), as_tensor(g)
        _, hx, wx, _ = x.shape
        _, hg, wg, _ = g.shape
        if hg < hx or wg < wx:
            raise ValueError(f"gating signal {hg}x{wg} smaller than features {hx}x{wx}")
        g = crop_center(g, hx, wx)
        f = relu(self.theta_bn(self.theta(x)) + self.phi_bn(self.phi(g)))
        z = self.psi_bn(self.psi(f))
        return sigmoid(clip(z, -RATE_LOGIT_BOUND, RATE_LOGIT_BOUND))

    def forward(self, x: Tensor, g: Tensor) -> Tensor:
        x = as_tensor(x)
        if self.force_open:
            return x
        r = self.rate(x, g)
        if self.record_rate:
            self.last_rate = r.data
        return mul(x, r)


def attention_gate(x: Tensor, g: Tensor, c: int, params: AttentionGate) -> Tensor:
    if params.theta.w.shape[-1] != c:
        raise ValueError(f"gate parameters have width {params.theta.w.shape[-1]}, expected {c}")
    return params(x, g)


class AttentionUpsampleBlock(Module):
    """Transpose-conv upsampling, attention-gated skip fusion, conv.

    ``x_up = ReLU(BN(ConvT(x)))``; ``att = gate(x_up, skip)`` with width f/2;
    ``out = ReLU(BN(Conv(concat(x_up, att))))``.
    """

    def __init__(self, cin: int, cskip: int, f: int, rng: np.random.Generator, k: int = 3, s: int = 2,
                 momentum: float = 0.9):
        super().__init__()
        if f % 2:
            raise ValueError(f"filter count must be even, got {f}")
        self.f, self.k, self.s = f, k, s
        self.up = self.child("up", Conv2d(cin, f, k, rng, stride=s, mode="transpose", bias=False))
        self.up_bn = self.child("up_bn", BatchNorm(f, momentum))
        self.gate = self.child("gate", AttentionGate(f, cskip, f // 2, rng, momentum))
        self.conv = self.child("conv", Conv2d(2 * f, f, k, rng, bias=False))
        self.conv_bn = self.child("conv_bn", BatchNorm(f, momentum))

    def upsample(self, x: Tensor) -> Tensor:
        return relu(self.up_bn(self.up(x)))

    def fuse(self, x_up: Tensor, skip: Tensor) -> Tensor:
        attended = self.gate(x_up, skip)
        return relu(self.conv_bn(self.conv(concat_channels(x_up, attended))))

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        return self.fuse(self.upsample(x), skip)


class UpsampleResidualBlock(AttentionUpsampleBlock):
    """:class:`AttentionUpsampleBlock` plus a 1x1-projected residual of ``x_up``."""

    def __init__(self, cin: int, cskip: int, f: int, rng: np.random.Generator, k: int = 3, s: int = 2,
                 momentum: float = 0.9):
        super().__init__(cin, cskip, f, rng, k, s, momentum)
        self.res = self.child("res", Conv2d(f, f, 1, rng))

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x_up = self.upsample(x)
        return self.fuse(x_up, skip) + self.res(x_up)


class ReconstructionHead(Module):
    """3x3 same-padded conv to ``num_classes`` channels with channel softmax."""

    def __init__(self, cin: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        if num_classes < 2:
            raise ValueError("reconstruction head needs at least 2 output channels")
        self.conv = self.child("conv", Conv2d(cin, num_classes, 3, rng))

    def logits(self, x: Tensor) -> Tensor:
        return self.conv(x)

    def forward(self, x: Tensor) -> Tensor:
        return softmax_channel(self.conv(x))


class DownsampleBlock(Module):
    """Two 3x3 conv+BN+ReLU layers then 2x2 max pooling.

    Returns ``(features, pooled)``; odd extents are floor-pooled.
    """

    def __init__(self, cin: int, f: int, rng: np.random.Generator, momentum: float = 0.9):
        super().__init__()
        self.conv1 = self.child("conv1", Conv2d(cin, f, 3, rng, bias=False))
        self.bn1 = self.child("bn1", BatchNorm(f, momentum))
        self.conv2 = self.child("conv2", Conv2d(f, f, 3, rng, bias=False))
        self.bn2 = self.child("bn2", BatchNorm(f, momentum))

    def features(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        if x.shape[1] < 2 or x.shape[2] < 2:
            raise ValueError("downsampling needs spatial extents >= 2")
        feats = self.features(x)
        return feats, pool_max2d(feats, 2, 2)


class ConvBlock(DownsampleBlock):
    """The two-conv stack of :class:`DownsampleBlock` without pooling (bottleneck)."""

    def forward(self, x: Tensor) -> Tensor:
        return self.features(x)


__all__ = [
    "AttentionGate",
    "AttentionUpsampleBlock",
    "ConvBlock",
    "DownsampleBlock",
    "ReconstructionHead",
    "UpsampleResidualBlock",
    "attention_gate",
    "crop_offsets",
]
