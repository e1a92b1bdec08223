"""Differentiable operators used by the segmentation layers.

All spatial tensors are NHWC. Convolution weights are ``(kh, kw, Cin, Cout)``
for standard and transpose modes and ``(kh, kw, C, 1)`` for depthwise mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result

ACTIVATIONS = ("relu", "silu", "sigmoid", "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def apply_activation(kind: str, x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if kind == "relu":
        mask = d > 0
        return make_result(d * mask, (x,), lambda g: (g * mask,), "relu")
    if kind == "sigmoid":
        s = _sigmoid(d)
        return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")
    if kind == "silu":
        s = _sigmoid(d)
        return make_result(d * s, (x,), lambda g: (g * (s + d * s * (1.0 - s)),), "silu")
    if kind == "softplus":
        out = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0.0)
        s = _sigmoid(d)
        return make_result(out, (x,), lambda g: (g * s,), "softplus")
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def relu(x):
    return apply_activation("relu", x)


def silu(x):
    return apply_activation("silu", x)


def sigmoid(x):
    return apply_activation("sigmoid", x)


def softplus(x):
    return apply_activation("softplus", x)


# ---------------------------------------------------------------------------
# convolution


def _same_pad(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _window(arr: np.ndarray, a: int, b: int, ho: int, wo: int, s: int) -> np.ndarray:
    return arr[:, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s, :]


def convolve2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
    mode: str = "standard",
) -> Tensor:
    """2D convolution over NHWC input.

    ``mode`` selects the standard, transpose (learned upsampling) or depthwise
    operator. With ``padding="same"`` a stride-1 standard convolution keeps
    H and W, and a stride-``s`` transpose convolution multiplies them by ``s``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"expected NHWC input and 4D kernel, got {x.shape} and {w.shape}")
    if mode == "standard":
        out = _conv_standard(x, w, stride, padding)
    elif mode == "transpose":
        out = _conv_transpose(x, w, stride, padding)
    elif mode == "depthwise":
        out = _conv_depthwise(x, w, stride, padding)
    else:
        raise ValueError(f"unknown convolution mode {mode!r}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out.shape[-1],):
            raise ValueError(f"bias shape {bias.shape} does not match {out.shape[-1]} output channels")
        out = out + bias
    return out


def _conv_standard(x: Tensor, w: Tensor, s: int, padding: str) -> Tensor:
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, input has {cin}")
    if padding == "same":
        ho, pt, pb = _same_pad(h, kh, s)
        wo, pl, pr = _same_pad(wd, kw, s)
    else:
        ho, wo = (h - kh) // s + 1, (wd - kw) // s + 1
        pt = pb = pl = pr = 0
        if ho < 1 or wo < 1:
            raise ValueError("kernel larger than input for valid padding")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    if kh == 1 and kw == 1:
        cols = _window(xp, 0, 0, ho, wo, s)
    else:
        cols = np.concatenate(
            [_window(xp, a, b, ho, wo, s) for a in range(kh) for b in range(kw)], axis=-1
        )
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(w.shape)
        dcols = g @ w2.T
        dxp = np.zeros_like(xp)
        idx = 0
        for a in range(kh):
            for b in range(kw):
                _window(dxp, a, b, ho, wo, s)[...] += dcols[..., idx * cin : (idx + 1) * cin]
                idx += 1
        dx = dxp[:, pt : pt + h, pl : pl + wd, :]
        return np.ascontiguousarray(dx), gw

    return make_result(out, (x, w), back, "conv2d")


def _transpose_geometry(n: int, k: int, s: int, padding: str) -> tuple[int, int, int]:
    """Return (full_extent, crop_offset, output_extent) for a transpose conv."""
    full = (n - 1) * s + k
    if padding == "valid":
        return full, 0, full
    out = n * s
    offset = max(k - s, 0) // 2
    return max(full, offset + out), offset, out


def _conv_transpose(x: Tensor, w: Tensor, s: int, padding: str) -> Tensor:
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, input has {cin}")
    fh, oh_off, ho = _transpose_geometry(h, kh, s, padding)
    fw, ow_off, wo = _transpose_geometry(wd, kw, s, padding)
    wt = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    cols = (x.data.reshape(-1, cin) @ wt).reshape(n, h, wd, kh, kw, cout)
    full = np.zeros((n, fh, fw, cout), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            _window(full, a, b, h, wd, s)[...] += cols[:, :, :, a, b, :]
    out = np.ascontiguousarray(full[:, oh_off : oh_off + ho, ow_off : ow_off + wo, :])

    def back(g):
        gfull = np.zeros((n, fh, fw, cout), dtype=g.dtype)
        gfull[:, oh_off : oh_off + ho, ow_off : ow_off + wo, :] = g
        dcols = np.empty((n, h, wd, kh, kw, cout), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                dcols[:, :, :, a, b, :] = _window(gfull, a, b, h, wd, s)
        dcols2 = dcols.reshape(-1, kh * kw * cout)
        dx = (dcols2 @ wt.T).reshape(x.shape)
        gw = (x.data.reshape(-1, cin).T @ dcols2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        return dx, np.ascontiguousarray(gw)

    return make_result(out, (x, w), back, "conv2d_transpose")


def _conv_depthwise(x: Tensor, w: Tensor, s: int, padding: str) -> Tensor:
    n, h, wd, c = x.shape
    kh, kw, wc, mult = w.shape
    if wc != c or mult != 1:
        raise ValueError(f"depthwise kernel must be (kh, kw, {c}, 1), got {w.shape}")
    if padding == "same":
        ho, pt, pb = _same_pad(h, kh, s)
        wo, pl, pr = _same_pad(wd, kw, s)
    else:
        ho, wo = (h - kh) // s + 1, (wd - kw) // s + 1
        pt = pb = pl = pr = 0
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    k = w.data[..., 0]
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            out += _window(xp, a, b, ho, wo, s) * k[a, b]

    def back(g):
        dxp = np.zeros_like(xp)
        gw = np.empty_like(k)
        for a in range(kh):
            for b in range(kw):
                win = _window(xp, a, b, ho, wo, s)
                gw[a, b] = (g * win).sum(axis=(0, 1, 2))
                _window(dxp, a, b, ho, wo, s)[...] += g * k[a, b]
        dx = np.ascontiguousarray(dxp[:, pt : pt + h, pl : pl + wd, :])
        return dx, gw[..., None]

    return make_result(out, (x, w), back, "conv2d_depthwise")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.shape[:-1]
    cin, cout = w.shape
    x2 = x.data.reshape(-1, cin)
    out = (x2 @ w.data).reshape(*lead, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2

    y = make_result(out, (x, w), back, "linear")
    return y + b if b is not None else y


# ---------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Exponential running mean/variance used by batch norm at inference."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def normalize(
    kind: str,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    running_stats: RunningStats | None = None,
    training: bool = True,
) -> Tensor:
    """Batch norm (per channel over N, H, W) or layer norm (over channels)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if kind == "layer":
        return _norm_train(x, gamma, beta, eps, axes=(-1,), op="layer_norm")
    if kind != "batch":
        raise ValueError(f"unknown normalization {kind!r}")
    axes = tuple(range(x.ndim - 1))
    if training:
        if running_stats is not None:
            m = x.size // c
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            unbiased = var * (m / (m - 1)) if m > 1 else var
            mom = running_stats.momentum
            running_stats.mean[...] = mom * running_stats.mean + (1.0 - mom) * mu
            running_stats.var[...] = mom * running_stats.var + (1.0 - mom) * unbiased
        return _norm_train(x, gamma, beta, eps, axes=axes, op="batch_norm")
    if running_stats is None:
        raise ValueError("batch norm in inference mode needs running statistics")
    inv = 1.0 / np.sqrt(running_stats.var + eps)
    xhat = (x.data - running_stats.mean) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), back, "batch_norm_eval")


def _norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, axes, op: str) -> Tensor:
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    m = d.size // mu.size
    red = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = inv * (dxhat - s1 / m - xhat * s2 / m)
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), back, op)


# ---------------------------------------------------------------------------
# softmax, pooling, concat, crop


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the last (channel) axis, stabilized by max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), back, "softmax")


def pool_max2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling with ``window == stride``; odd trailing rows/cols are dropped."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    x = as_tensor(x)
    n, h, w, c = x.shape
    ho, wo = h // window, w // window
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} smaller than pooling window {window}")
    k = window
    blocks = x.data[:, : ho * k, : wo * k, :].reshape(n, ho, k, wo, k, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, ho, wo, c, k * k), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * k, wo * k, c)
        dx = np.zeros_like(x.data)
        dx[:, : ho * k, : wo * k, :] = gb
        return (dx,)

    return make_result(out, (x,), back, "max_pool2d")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[-1]

    def back(g):
        return np.ascontiguousarray(g[..., :ca]), np.ascontiguousarray(g[..., ca:])

    return make_result(np.concatenate([a.data, b.data], axis=-1), (a, b), back, "concat_channels")


def crop_offsets(src_h: int, src_w: int, target_h: int, target_w: int) -> tuple[int, int]:
    if target_h > src_h or target_w > src_w:
        raise ValueError(f"crop target {target_h}x{target_w} larger than source {src_h}x{src_w}")
    return (src_h - target_h) // 2, (src_w - target_w) // 2


def crop_center(x: Tensor, target_h: int, target_w: int) -> Tensor:
    x = as_tensor(x)
    _, h, w, _ = x.shape
    oh, ow = crop_offsets(h, w, target_h, target_w)
    if (oh, ow) == (0, 0) and (target_h, target_w) == (h, w):
        return x
    out = np.ascontiguousarray(x.data[:, oh : oh + target_h, ow : ow + target_w, :])

    def back(g):
        dx = np.zeros_like(x.data)
        dx[:, oh : oh + target_h, ow : ow + target_w, :] = g
        return (dx,)

    return make_result(out, (x,), back, "crop_center")
