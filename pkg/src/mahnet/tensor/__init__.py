"""Minimal NHWC tensor engine with reverse-mode differentiation."""
from .tensor import (
    GraphError,
    NonFiniteError,
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    current_tape,
    div,
    exp,
    flip,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    stack_split,
    sub,
    transpose,
    tsum,
)
from .ops import (
    RunningStats,
    apply_activation,
    concat_channels,
    convolve2d,
    crop_center,
    crop_offsets,
    linear,
    normalize,
    pool_max2d,
    relu,
    sigmoid,
    silu,
    softmax_channel,
    softplus,
)
from .fft import fft, fft_real, ifft, ifft_real
from .optim import Adam, AdamHyper, SGD, optimizer_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, encode_checkpoint, decode_checkpoint
