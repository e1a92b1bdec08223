"""Vision state-space module (VSS), VM layer, and the 2D cross-scan.

Feature maps are NHWC. A cross-scan flattens the map along up to four
raster orders, the SSM runs on every flattened sequence, and the merge
un-flattens each result and averages them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm.layer import SSM
from .tensor import Tensor, as_tensor, concat, flip, mul, reshape, silu, stack_split, transpose
from .tensor.nn import Conv2d, LayerNorm, Linear, Module

DIRECTIONS = (1, 2, 4)


@dataclass(frozen=True)
class VSSConfig:
    channels: int
    expansion: float = 2.0
    state_dim: int = 8
    directions: int = 4
    dwconv_kernel: int = 3
    ssm_mode: str = "selective"

    def __post_init__(self):
        inner = self.expansion * self.channels
        if abs(inner - round(inner)) > 1e-9 or inner < 1:
            raise ValueError(f"expansion x channels must be a positive integer, got {inner}")
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.directions not in DIRECTIONS:
            raise ValueError(f"directions must be one of {DIRECTIONS}")

    @property
    def inner(self) -> int:
        return int(round(self.expansion * self.channels))


def scan_2d(feature: Tensor, direction: int) -> Tensor:
    """Flatten (N, H, W, C) to (N, H*W, C).

    0: row-major, 1: row-major reversed, 2: column-major, 3: column-major reversed.
    """
    feature = as_tensor(feature)
    n, h, w, c = feature.shape
    if h * w == 0:
        raise ValueError("cannot scan an empty spatial map")
    if direction not in (0, 1, 2, 3):
        raise ValueError(f"direction must be 0..3, got {direction}")
    if direction >= 2:
        feature = transpose(feature, (0, 2, 1, 3))
    seq = reshape(feature, (n, h * w, c))
    if direction % 2:
        seq = flip(seq, 1)
    return seq


def unscan_2d(seq: Tensor, direction: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`scan_2d` for one direction."""
    seq = as_tensor(seq)
    n, L, c = seq.shape
    if L != h * w:
        raise ValueError(f"sequence length {L} != {h}x{w}")
    if direction % 2:
        seq = flip(seq, 1)
    if direction >= 2:
        return transpose(reshape(seq, (n, w, h, c)), (0, 2, 1, 3))
    return reshape(seq, (n, h, w, c))


def merge_2d(sequences, h: int, w: int, directions=None) -> Tensor:
    """Un-flatten each sequence by its direction and average the maps."""
    sequences = list(sequences)
    if directions is None:
        directions = range(len(sequences))
    maps = [unscan_2d(s, d, h, w) for s, d in zip(sequences, directions)]
    total = maps[0]
    for m in maps[1:]:
        total = total + m
    return total * (1.0 / len(maps)) if len(maps) > 1 else total


class VSSModule(Module):
    """Two-branch VSS block.

    Branch 1: Linear(C -> lam*C), depthwise conv, SiLU, SSM over the
    cross-scan, LayerNorm. Branch 2: SiLU(Linear(C -> lam*C)). The branches
    are multiplied elementwise and projected back to C channels.

    Test hooks: ``bypass_dwconv``, ``bypass_act`` (branch 1) and
    ``gate_ones`` (replace branch 2 by ones). ``trace`` collects
    intermediates in ``self.captured`` when set.
    """

    def __init__(self, cfg: VSSConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c, inner = cfg.channels, cfg.inner
        self.in_proj = self.child("in_proj", Linear(c, inner, rng))
        self.dwconv = self.child("dwconv", Conv2d(inner, inner, cfg.dwconv_kernel, rng, mode="depthwise"))
        self.ssm = self.child("ssm", SSM(inner, cfg.state_dim, rng, cfg.ssm_mode))
        self.norm = self.child("norm", LayerNorm(inner))
        self.gate_proj = self.child("gate_proj", Linear(c, inner, rng))
        self.out_proj = self.child("out_proj", Linear(inner, c, rng))
        self.bypass_dwconv = False
        self.bypass_act = False
        self.gate_ones = False
        self.trace = False
        self.captured: dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        """Accepts (N, H, W, C) maps or (N, L, C) sequences with grid ``hw``."""
        x = as_tensor(x)
        seq_input = x.ndim == 3
        if seq_input:
            n, L, c = x.shape
            h, w = hw if hw is not None else (1, L)
            if h * w != L:
                raise ValueError(f"grid {h}x{w} does not match sequence length {L}")
            x = reshape(x, (n, h, w, c))
        n, h, w, c = x.shape
        if c != self.cfg.channels:
            raise ValueError(f"expected {self.cfg.channels} channels, got {c}")
        z = self.in_proj(x)
        if not self.bypass_dwconv:
            z = self.dwconv(z)
        if not self.bypass_act:
            z = silu(z)
        dirs = list(range(self.cfg.directions))
        seqs = concat([scan_2d(z, d) for d in dirs], axis=0)
        y = self.ssm(seqs)
        y_map = merge_2d(stack_split(y, len(dirs), axis=0), h, w, dirs)
        if self.trace:
            self.captured["ssm_out"] = y_map.data.copy()
        w1 = self.norm(y_map)
        out = w1 if self.gate_ones else mul(w1, silu(self.gate_proj(x)))
        out = self.out_proj(out)
        return reshape(out, (n, h * w, c)) if seq_input else out


class VMLayer(Module):
    """Residual VSS layer with a learned per-channel adjustment factor ``s``.

    ``out = Proj(LN2(VSS(LN1(M)) + s * M))``; ``s`` starts at ones.
    """

    def __init__(self, cfg: VSSConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.channels
        self.s = self.param("s", np.ones(c))
        self.norm1 = self.child("norm1", LayerNorm(c))
        self.vss = self.child("vss", VSSModule(cfg, rng))
        self.norm2 = self.child("norm2", LayerNorm(c))
        self.proj = self.child("proj", Linear(c, c, rng))

    def forward(self, m: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        m = as_tensor(m)
        mixed = self.vss(self.norm1(m), hw) + m * self.s
        return self.proj(self.norm2(mixed))
