"""AHNet / Mamba-AHNet assembly."""
from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..blocks import AttentionUpsampleBlock, ConvBlock, DownsampleBlock, ReconstructionHead, UpsampleResidualBlock
from ..tensor import Tensor, as_tensor, clip, softmax_channel
from ..tensor.nn import Conv2d, Module
from ..vss import VMLayer, VSSConfig


class InputRangeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 4
    base_filters: int = 16
    num_classes: int = 2
    use_mamba: bool = True
    mamba_mode: str = "selective"
    use_reconstruction: bool = True
    recon_bins: int | None = None
    input_size: tuple[int, int] = (256, 256)
    in_channels: int = 1
    state_dim: int = 8
    expansion: float = 2.0
    scan_directions: int = 4
    kernel: int = 3
    bn_momentum: float = 0.9
    strict_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_filters < 2 or self.base_filters % 2:
            raise ValueError("base_filters must be even and >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.mamba_mode not in ("lti", "selective"):
            raise ValueError(f"mamba_mode must be 'lti' or 'selective', got {self.mamba_mode!r}")
        if self.recon_bins is not None and self.recon_bins < 2:
            raise ValueError("recon_bins must be >= 2")
        step = 2**self.depth
        if len(self.input_size) != 2 or any(v % step or v < step for v in self.input_size):
            raise ValueError(f"input size {self.input_size} not divisible by 2^depth = {step}")

    @property
    def bins(self) -> int:
        return self.recon_bins or self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown network keys: {sorted(extra)}")
        return cls(**d)


def _external_name(name: str) -> str:
    # vm.<i>.vss.ssm.* -> ssm.<i>.*, vm.<i>.vss.* -> vss.<i>.*
    parts = name.split(".")
    if parts[0] == "vm" and len(parts) > 3 and parts[2] == "vss":
        if parts[3] == "ssm":
            return ".".join(["ssm", parts[1]] + parts[4:])
        return ".".join(["vss", parts[1]] + parts[3:])
    return name


def _internal_name(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "ssm":
        return ".".join(["vm", parts[1], "vss", "ssm"] + parts[2:])
    if parts[0] == "vss":
        return ".".join(["vm", parts[1], "vss"] + parts[2:])
    return name


class Network(Module):
    """Encoder, bottleneck, decoder stages and the two heads.

    Stage ``i`` of the decoder works at level ``depth - 1 - i`` with
    ``base * 2**level`` filters: an optional VM layer over the cross-scanned
    stage input, an attention upsampling block (stride 2) and a residual
    upsampling block (stride 1) sharing the same skip.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        b, k, mom = spec.base_filters, spec.kernel, spec.bn_momentum
        self.enc = []
        cin = spec.in_channels
        for i in range(spec.depth):
            self.enc.append(self.child(f"enc.{i}", DownsampleBlock(cin, b * 2**i, rng, mom)))
            cin = b * 2**i
        self.mid = self.child("mid", ConvBlock(cin, b * 2**spec.depth, rng, mom))
        self.vm, self.dec_gate, self.dec_res = [], [], []
        for i in range(spec.depth):
            level = spec.depth - 1 - i
            f, cin = b * 2**level, b * 2 ** (level + 1)
            if spec.use_mamba:
                cfg = VSSConfig(cin, spec.expansion, spec.state_dim, spec.scan_directions, 3, spec.mamba_mode)
                self.vm.append(self.child(f"vm.{i}", VMLayer(cfg, rng)))
            self.dec_gate.append(self.child(f"dec.{i}.gate", AttentionUpsampleBlock(cin, f, f, rng, k, 2, mom)))
            self.dec_res.append(self.child(f"dec.{i}.res", UpsampleResidualBlock(f, f, f, rng, k, 1, mom)))
        self.head = self.child("head", Conv2d(b, spec.num_classes, 1, rng))
        self.recon = self.child("recon", ReconstructionHead(b, spec.bins, rng)) if spec.use_reconstruction else None

    # -- test hooks -------------------------------------------------------
    def set_gates_open(self, flag: bool = True) -> None:
        """Pin every attention rate to 1 (gate-free baseline)."""
        for blk in self.dec_gate + self.dec_res:
            blk.gate.force_open = flag

    def gate_rates(self) -> list[np.ndarray]:
        return [blk.gate.last_rate for blk in self.dec_gate + self.dec_res if blk.gate.last_rate is not None]

    # -- parameters -------------------------------------------------------
    def astype(self, dtype) -> "Network":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((_external_name(k), v) for k, v in super().state_dict().items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        # the base loader matches against state_dict(), which already uses external names
        own = {k: v for k, v in state.items() if not k.startswith(("optim.", "train."))}
        super().load_state_dict(own, strict)

    def internal_state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return super().state_dict()

    # -- forward ----------------------------------------------------------
    def _check_input(self, images) -> Tensor:
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(x.shape + (1,))
        h, w = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (h, w, self.spec.in_channels):
            raise ValueError(f"expected images (N, {h}, {w}, {self.spec.in_channels}), got {x.shape}")
        lo, hi = float(x.data.min()), float(x.data.max())
        if lo < 0.0 or hi > 1.0:
            if self.spec.strict_input:
                raise InputRangeError(f"image values outside [0, 1]: [{lo}, {hi}]")
            warnings.warn(f"clamping image values from [{lo}, {hi}] to [0, 1]", stacklevel=3)
            x = clip(x, 0.0, 1.0)
        return x

    def features(self, images) -> Tensor:
        x = self._check_input(images)
        skips = []
        for blk in self.enc:
            feat, x = blk(x)
            skips.append(feat)
        x = self.mid(x)
        for i in range(self.spec.depth):
            skip = skips[self.spec.depth - 1 - i]
            if self.spec.use_mamba:
                x = self.vm[i](x)
            x = self.dec_gate[i](x, skip)
            x = self.dec_res[i](x, skip)
        return x

    def forward(self, images) -> tuple[Tensor, Tensor | None]:
        feats = self.features(images)
        seg = softmax_channel(self.head(feats))
        rec = self.recon(feats) if self.recon is not None else None
        return seg, rec


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Network:
    net = Network(spec, np.random.default_rng(seed))
    if np.dtype(dtype) != np.float64:
        net.astype(dtype)
    return net
