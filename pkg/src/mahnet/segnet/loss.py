"""Segmentation + reconstruction objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..tensor import Tensor, as_tensor, clip, log, mul, tsum

SEG_LOSSES = ("cross_entropy", "soft_dice", "sum")
PROB_FLOOR = 1e-12
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    alpha_recon: float = 0.5
    seg_loss: str = "sum"

    def __post_init__(self):
        if not self.alpha_recon >= 0:
            raise ValueError("alpha_recon must be >= 0")
        if self.seg_loss not in SEG_LOSSES:
            raise ValueError(f"seg_loss must be one of {SEG_LOSSES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown loss keys: {sorted(extra)}")
        return cls(**d)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside 0..{k - 1}")
    return np.eye(k)[labels.astype(np.int64)]


def intensity_bins(images: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins over [0, 1]; 1.0 falls in the top bin."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 4:
        x = x[..., 0]
    return np.minimum(np.floor(np.clip(x, 0.0, 1.0) * bins), bins - 1).astype(np.int64)


def _check_onehot(gt: np.ndarray) -> None:
    if not (np.isin(gt, (0, 1)).all() and np.all(gt.sum(axis=-1) == 1)):
        raise ValueError("ground truth is not one-hot")


def cross_entropy(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -sum_c q log p, with p floored at PROB_FLOOR."""
    probs = as_tensor(probs)
    npix = int(np.prod(probs.shape[:-1]))
    picked = tsum(mul(log(clip(probs, PROB_FLOOR, 1.0)), target))
    return picked * (-1.0 / npix)


def soft_dice(probs: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum pq + eps) / (sum p + sum q + eps), averaged over foreground classes."""
    probs = as_tensor(probs)
    k = probs.shape[-1]
    classes = range(1, k) if k > 1 else range(k)
    total = None
    for c in classes:
        p = probs[..., c]
        q = target[..., c]
        num = tsum(mul(p, q)) * 2.0 + eps
        den = tsum(p) + float(q.sum()) + eps
        term = 1.0 - num / den
        total = term if total is None else total + term
    return total * (1.0 / len(classes))


def seg_loss(probs: Tensor, gt_onehot: np.ndarray, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(probs, gt_onehot)
    if kind == "soft_dice":
        return soft_dice(probs, gt_onehot)
    if kind == "sum":
        return cross_entropy(probs, gt_onehot) + soft_dice(probs, gt_onehot)
    raise ValueError(f"unknown seg_loss {kind!r}")


def combined_loss(seg_probs: Tensor, seg_gt_onehot: np.ndarray, recon_probs: Tensor | None,
                  images: np.ndarray, weights: LossWeights) -> Tensor:
    seg_gt_onehot = np.asarray(seg_gt_onehot, dtype=np.float64)
    if seg_gt_onehot.shape != tuple(seg_probs.shape):
        raise ValueError(f"ground truth {seg_gt_onehot.shape} does not match predictions {seg_probs.shape}")
    _check_onehot(seg_gt_onehot)
    loss = seg_loss(seg_probs, seg_gt_onehot, weights.seg_loss)
    if recon_probs is not None and weights.alpha_recon > 0:
        images = images.data if isinstance(images, Tensor) else images
        target = one_hot(intensity_bins(images, recon_probs.shape[-1]), recon_probs.shape[-1])
        loss = loss + cross_entropy(recon_probs, target) * weights.alpha_recon
    return loss
