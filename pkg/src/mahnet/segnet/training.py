"""Training loop, evaluation and prediction."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..metrics import MetricsReport
from ..tensor import Adam, AdamHyper, SGD, Tape, backward, load_checkpoint, no_grad, save_checkpoint
from .loss import LossWeights, combined_loss, one_hot
from .network import Network, NetworkSpec, build_network

OPTIMIZERS = ("adam", "sgd")


def to_images(records, dtype=np.float64) -> np.ndarray:
    """uint8 slices -> (N, H, W, 1) in [0, 1]."""
    return (np.stack([r.image for r in records]).astype(dtype) / 255.0)[..., None]


@dataclass
class TrainingReport:
    spec: dict
    weights: dict
    parameter_count: int
    seed: int
    lr: float
    batch_size: int
    losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    network: Network | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "weights": self.weights,
            "parameter_count": self.parameter_count,
            "seed": self.seed,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": len(self.losses),
            "losses": self.losses,
            "epoch_seconds": self.epoch_seconds,
            "checkpoints": self.checkpoints,
            "evaluations": self.evaluations,
            "stopped_early": self.stopped_early,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def make_optimizer(kind: str, params, lr: float):
    if kind == "adam":
        return Adam(params, AdamHyper(lr=lr))
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_step(net: Network, opt, images: np.ndarray, labels: np.ndarray, weights: LossWeights) -> float:
    net.train()
    opt.zero_grad()
    with Tape() as tape:
        seg, rec = net(images)
        loss = combined_loss(seg, one_hot(labels, net.spec.num_classes), rec, images, weights)
    backward(loss, tape)
    opt.step()
    return loss.item()


def train(spec: NetworkSpec, weights: LossWeights, bundle, epochs: int, lr: float = 1e-3, seed: int = 0,
          checkpoint_dir=None, *, batch_size: int = 4, optimizer: str = "adam", dtype=np.float64,
          resume=None, eval_every: int = 0, stop_dsc: float | None = None,
          callback: Callable[[int, float, Network], bool] | None = None,
          log: Callable[[str], None] | None = None) -> TrainingReport:
    """Mini-batch training with a per-epoch checkpoint.

    The shuffle for epoch ``e`` depends only on ``(seed, e)``, so resuming
    from the epoch-``e`` checkpoint reproduces the uninterrupted run.
    With ``eval_every > 0`` the training set is evaluated periodically and
    training stops once the mean DSC reaches ``stop_dsc``.
    """
    records = list(bundle.records if hasattr(bundle, "records") else bundle)
    if not records:
        raise ValueError("training bundle is empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if records[0].image.shape != spec.input_size:
        raise ValueError(f"bundle images are {records[0].image.shape}, network expects {spec.input_size}")
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        try:
            ckdir.mkdir(parents=True, exist_ok=True)
            probe = ckdir / ".write_probe"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise OSError(f"checkpoint directory {ckdir} is not writable: {exc}") from exc

    net = build_network(spec, seed, dtype)
    opt = make_optimizer(optimizer, net.parameters(), lr)
    start = 0
    if resume is not None:
        state = load_checkpoint(resume)
        net.load_state_dict(state)
        opt.load_state_arrays({k: v for k, v in state.items() if k.startswith("optim.")})
        start = int(state["train.epoch"][0])
    images = to_images(records, dtype)
    labels = np.stack([r.label for r in records]).astype(np.int64)
    report = TrainingReport(spec.to_dict(), weights.to_dict(), net.parameter_count(), seed, lr, batch_size,
                            network=net)
    n = len(records)
    for epoch in range(start, start + epochs):
        t0 = time.perf_counter()
        order = epoch_order(seed, epoch, n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            total += train_step(net, opt, images[idx], labels[idx], weights) * len(idx)
        loss = total / n
        report.epoch_seconds.append(time.perf_counter() - t0)
        report.losses.append(loss)
        if ckdir is not None:
            path = ckdir / f"epoch_{epoch + 1:04d}.mahw"
            save_checkpoint(path, checkpoint_arrays(net, opt, epoch + 1))
            report.checkpoints.append(str(path))
        if log:
            log(f"epoch {epoch + 1} loss {loss:.6f} ({report.epoch_seconds[-1]:.2f}s)")
        stop = False
        if eval_every and (epoch + 1 - start) % eval_every == 0:
            mean_dsc = evaluate(net, records).aggregate()["DSC"]["mean"]
            report.evaluations.append({"epoch": epoch + 1, "dsc": mean_dsc})
            if log:
                log(f"epoch {epoch + 1} train DSC {mean_dsc:.4f}")
            stop = stop_dsc is not None and mean_dsc >= stop_dsc
        if callback is not None and callback(epoch + 1, loss, net):
            stop = True
        if stop:
            report.stopped_early = epoch + 1 < start + epochs
            break
    net.eval()
    return report


def checkpoint_arrays(net: Network, opt=None, epoch: int | None = None) -> dict:
    arrays = dict(net.state_dict())
    if opt is not None:
        arrays.update(opt.state_arrays())
    if epoch is not None:
        arrays["train.epoch"] = np.array([epoch], dtype=np.int64)
    return arrays


def load_network(spec: NetworkSpec, path, dtype=np.float64) -> Network:
    net = build_network(spec, 0, dtype)
    net.load_state_dict(load_checkpoint(path))
    return net.eval()


def predict_probs(net: Network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode foreground probability maps (N, H, W), no tape."""
    was_training = net.training
    net.eval()
    out = []
    try:
        with no_grad():
            for s in range(0, len(images), batch_size):
                seg, _ = net(images[s : s + batch_size])
                out.append(seg.data)
    finally:
        net.train(was_training)
    return np.concatenate(out, axis=0)


def probs_to_mask(seg_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(argmax != background) mask and foreground probability 1 - p_background."""
    return (np.argmax(seg_probs, axis=-1) != 0).astype(np.uint8), 1.0 - seg_probs[..., 0]


def evaluate(net: Network | None, bundle, predictor: Callable | None = None) -> MetricsReport:
    """Per-slice metrics over a labelled bundle.

    ``predictor`` (test hook) maps a record to ``(mask, foreground_probs)``
    and replaces the network.
    """
    records = list(bundle.records if hasattr(bundle, "records") else bundle)
    if not records:
        raise ValueError("evaluation bundle is empty")
    report = MetricsReport()
    if predictor is None:
        if net is None:
            raise ValueError("evaluate needs a network or a predictor")
        seg = predict_probs(net, to_images(records, net.parameters()[0].dtype))
        masks, probs = probs_to_mask(seg)
        outputs = list(zip(masks, probs))
    else:
        outputs = [predictor(r) for r in records]
    if len(outputs) != len(records):
        raise ValueError("prediction count does not match label count")
    for r, (mask, prob) in zip(records, outputs):
        report.add(r.key, mask, r.label, prob)
    return report
