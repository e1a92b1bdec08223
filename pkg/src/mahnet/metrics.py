"""Segmentation metrics for 2D binary masks.

Distances are Euclidean on pixel centers with unit spacing. Metrics that
are undefined for a mask pair raise :class:`UndefinedMetricError`; the
report builder counts those cases instead of averaging them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

# column order of the published result tables
COLUMNS = ("DSC", "RAVD", "ASD", "MHD", "AUC", "IoU")


class UndefinedMetricError(ValueError):
    pass


def _masks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for m in (pred, gt):
        if m.size and not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred, gt) -> tuple[int, int, int, int]:
    p, g = _masks(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p.size - tp - fp - fn


def dsc(pred, gt) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    tp, fp, fn, _ = confusion(pred, gt)
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def iou(pred, gt) -> float:
    tp, fp, fn, _ = confusion(pred, gt)
    den = tp + fp + fn
    return 1.0 if den == 0 else tp / den


def ravd(pred, gt) -> float:
    p, g = _masks(pred, gt)
    vt = int(g.sum())
    if vt == 0:
        raise UndefinedMetricError("RAVD undefined for empty ground truth")
    return abs(int(p.sum()) - vt) / vt


def _points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask).astype(np.float64)


def _mean_nearest(src: np.ndarray, dst: np.ndarray) -> float:
    d, _ = cKDTree(dst).query(src, k=1)
    return float(np.mean(d))


def mhd(pred, gt) -> float:
    """Symmetric average Hausdorff distance between foreground pixel sets."""
    p, g = _masks(pred, gt)
    P, T = _points(p), _points(g)
    if len(P) == 0 or len(T) == 0:
        raise UndefinedMetricError("MHD undefined for an empty mask")
    return max(_mean_nearest(P, T), _mean_nearest(T, P))


def extract_surface(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor or on the image border.

    Returns an (k, 2) integer array of (row, col) in row-major order.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("surface extraction needs a 2-D mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def asd(pred, gt) -> float:
    """Mean distance from each predicted surface pixel to the nearest gt surface pixel."""
    p, g = _masks(pred, gt)
    sp, sg = extract_surface(p), extract_surface(g)
    if len(sp) == 0 or len(sg) == 0:
        raise UndefinedMetricError("ASD undefined for an empty surface")
    return _mean_nearest(sp.astype(np.float64), sg.astype(np.float64))


def auc(probs, gt) -> float:
    """Mann-Whitney estimate of ROC AUC, ties counted as one half."""
    s = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(gt).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("score and label counts differ")
    npos = int(y.sum())
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("AUC needs both classes in the ground truth")
    ranks = rankdata(s)  # average ranks resolve ties
    u = ranks[y].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def case_metrics(pred, gt, probs=None) -> dict[str, float | None]:
    """All six metrics for one slice; undefined ones are ``None``."""
    out: dict[str, float | None] = {}
    fns = {"DSC": dsc, "RAVD": ravd, "ASD": asd, "MHD": mhd, "IoU": iou}
    for name in COLUMNS:
        try:
            if name == "AUC":
                out[name] = auc(pred if probs is None else probs, gt)
            else:
                out[name] = float(fns[name](pred, gt))
        except UndefinedMetricError:
            out[name] = None
    return out


@dataclass
class MetricsReport:
    cases: list[dict] = field(default_factory=list)

    def add(self, case_id: str, pred, gt, probs=None) -> dict:
        row = {"case": case_id, **case_metrics(pred, gt, probs)}
        p, g = _masks(pred, gt)
        row["both_empty"] = bool(not p.any() and not g.any())
        self.cases.append(row)
        return row

    def aggregate(self) -> dict[str, dict]:
        agg = {}
        for name in COLUMNS:
            vals = [c[name] for c in self.cases if c[name] is not None]
            agg[name] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
                "defined": len(vals),
                "undefined": len(self.cases) - len(vals),
            }
        return agg

    def to_dict(self) -> dict:
        return {
            "columns": list(COLUMNS),
            "cases": [
                {"case": c["case"], **{k: c[k] for k in COLUMNS}, "both_empty": c["both_empty"]}
                for c in self.cases
            ],
            "aggregate": self.aggregate(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False)

    def table_row(self) -> list[float | None]:
        agg = self.aggregate()
        return [agg[k]["mean"] for k in COLUMNS]

    def format_row(self, label: str = "") -> str:
        cells = ["  n/a " if v is None or math.isnan(v) else f"{v:6.4f}" for v in self.table_row()]
        return f"{label:<28}" + " ".join(cells)
