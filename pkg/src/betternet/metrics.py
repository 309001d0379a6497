"""Polyp-segmentation evaluation: mDice, mIoU, MAE, weighted F-measure,
S-measure and E-measure (mean and max over 256 thresholds).

All inputs are 2-D arrays: ``pred`` is a soft map in [0, 1], ``gt`` is
binary. Arithmetic is float64 throughout.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import LabelError, ShapeError

EPS = np.finfo(np.float64).eps
COLUMNS = ("mdice", "miou", "fwb", "smeasure", "me", "maxe", "mae")
THRESHOLDS = np.arange(256) / 255.0


@dataclass
class MaskPair:
    pred: np.ndarray
    gt: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred.shape != self.gt.shape:
            raise ShapeError(f"pred {self.pred.shape} and gt {self.gt.shape} differ")
        if not np.all((self.gt == 0) | (self.gt == 1)):
            raise LabelError("ground truth must be binary")


def _binary(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == bool:
        return x
    if not np.all((x == 0) | (x == 1)):
        raise LabelError(f"{what} must be binary")
    return x.astype(bool)


def confusion(pred_bin, gt) -> dict:
    p = _binary(pred_bin, "pred_bin")
    g = _binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return {"TP": tp, "FP": fp, "FN": fn, "TN": tn}


def dice(pred, gt, threshold: float = 0.5) -> float:
    c = confusion(np.asarray(pred) > threshold, gt)
    denom = 2 * c["TP"] + c["FP"] + c["FN"]
    return 1.0 if denom == 0 else 2 * c["TP"] / denom


def iou(pred, gt, threshold: float = 0.5) -> float:
    c = confusion(np.asarray(pred) > threshold, gt)
    denom = c["TP"] + c["FP"] + c["FN"]
    return 1.0 if denom == 0 else c["TP"] / denom


def mae(pred, gt) -> float:
    # correctly rounded sum, so the value does not depend on summation order
    diff = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    return math.fsum(diff.ravel()) / diff.size


# ---------------------------------------------------------------- weighted F-measure


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def _lattice_offsets(d2: int) -> list[tuple[int, int]]:
    """All integer (dy, dx) with dy^2 + dx^2 == d2, in row-major (flat index) order."""
    out = []
    r = math.isqrt(d2)
    for dy in range(-r, r + 1):
        rem = d2 - dy * dy
        dx = math.isqrt(rem)
        if dx * dx == rem:
            out.extend([(dy, -dx), (dy, dx)] if dx else [(dy, 0)])
    return out


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance to, and flat index of, the nearest foreground pixel.

    Ties go to the smallest row-major index. Foreground pixels map to
    themselves at distance 0.
    """
    g = gt.astype(bool)
    h, w = g.shape
    dist = ndimage.distance_transform_edt(~g)
    d2 = np.rint(dist * dist).astype(np.int64)
    index = np.full(g.shape, -1, dtype=np.int64)
    index[g] = np.flatnonzero(g)
    for v in np.unique(d2[~g]):
        ys, xs = np.nonzero(d2 == v)
        best = np.full(ys.shape, -1, dtype=np.int64)
        for dy, dx in _lattice_offsets(int(v)):
            ty, tx = ys + dy, xs + dx
            ok = (best < 0) & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            hit = np.zeros_like(ok)
            hit[ok] = g[ty[ok], tx[ok]]
            best[hit] = ty[hit] * w + tx[hit]
        index[ys, xs] = best
    return dist, index


def weighted_fbeta(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure with dependency- and distance-weighted errors.

    Returns 0.0 for an empty ground truth (see :func:`evaluate_dataset`
    for flagging).
    """
    pred = np.asarray(pred, dtype=np.float64)
    g = _binary(gt, "gt")
    if not g.any():
        return 0.0
    err = np.abs(pred - g)
    if g.all():
        dist = np.zeros(g.shape)
        spread = err
    else:
        dist, index = nearest_foreground(g)
        # background pixels borrow the error of their nearest foreground pixel
        spread = err.reshape(-1)[index]
    smoothed = ndimage.correlate(spread, gaussian_kernel(), mode="constant", cval=0.0)
    min_err = np.where(g & (smoothed < err), smoothed, err)
    importance = np.where(g, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_err * importance
    tpw = np.count_nonzero(g) - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (EPS + tpw + fpw)
    q = (1.0 + beta2) * recall * precision / (EPS + recall + beta2 * precision)
    return float(np.clip(q, 0.0, 1.0))


# ---------------------------------------------------------------- S-measure


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _object_score(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((gt - y) ** 2).sum() / denom
    sxy = ((pred - x) * (gt - y)).sum() / denom
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    g = _binary(gt, "gt")
    mu = g.mean()
    if mu == 0:
        score = 1.0 - pred.mean()
    elif mu == 1:
        score = pred.mean()
    else:
        s_obj = mu * _object_score(pred[g]) + (1 - mu) * _object_score(1.0 - pred[~g])
        score = alpha * s_obj + (1 - alpha) * _region_score(pred, g)
    return float(np.clip(score, 0.0, 1.0))


def _region_score(pred: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    rows, cols = np.nonzero(g)
    # split just past the (rounded) foreground centroid
    x = _round_half_up(cols.mean()) + 1
    y = _round_half_up(rows.mean()) + 1
    gf = g.astype(np.float64)
    area = h * w
    parts = [
        ((slice(0, y), slice(0, x)), x * y / area),
        ((slice(0, y), slice(x, w)), (w - x) * y / area),
        ((slice(y, h), slice(0, x)), x * (h - y) / area),
        ((slice(y, h), slice(x, w)), (w - x) * (h - y) / area),
    ]
    score = 0.0
    for sl, weight in parts:
        if weight > 0 and pred[sl].size:
            score += weight * _ssim(pred[sl], gf[sl])
    return score


# ---------------------------------------------------------------- E-measure


def _enhanced(dg: float, dp: float) -> float:
    align = 2.0 * dg * dp / (dg * dg + dp * dp + EPS)
    return (align + 1.0) ** 2 / 4.0


def e_measure_curve(pred, gt) -> np.ndarray:
    """E(t) for t = 0, 1/255, ..., 1 with the strict rule ``pred > t``."""
    pred = np.asarray(pred, dtype=np.float64)
    g = _binary(gt, "gt")
    n = g.size
    fg_vals = np.sort(pred[g])
    bg_vals = np.sort(pred[~g])
    n_fg = fg_vals.size
    tp = n_fg - np.searchsorted(fg_vals, THRESHOLDS, side="right")
    fp = bg_vals.size - np.searchsorted(bg_vals, THRESHOLDS, side="right")
    if n_fg == 0:
        return 1.0 - (tp + fp) / n
    if n_fg == n:
        return (tp + fp) / n
    fn = n_fg - tp
    tn = bg_vals.size - fp
    mu_g = n_fg / n
    curve = np.empty(THRESHOLDS.size)
    for i in range(THRESHOLDS.size):
        mu_p = (tp[i] + fp[i]) / n
        total = (
            tp[i] * _enhanced(1 - mu_g, 1 - mu_p)
            + fn[i] * _enhanced(1 - mu_g, -mu_p)
            + fp[i] * _enhanced(-mu_g, 1 - mu_p)
            + tn[i] * _enhanced(-mu_g, -mu_p)
        )
        curve[i] = total / n
    return curve


def e_measure(pred, gt) -> dict:
    curve = e_measure_curve(pred, gt)
    return {"mE": float(curve.mean()), "maxE": float(curve.max())}


# ---------------------------------------------------------------- dataset report


def evaluate_pair(pred, gt, threshold: float = 0.5) -> dict:
    em = e_measure(pred, gt)
    return {
        "mdice": dice(pred, gt, threshold),
        "miou": iou(pred, gt, threshold),
        "fwb": weighted_fbeta(pred, gt),
        "smeasure": s_measure(pred, gt),
        "me": em["mE"],
        "maxe": em["maxE"],
        "mae": mae(pred, gt),
    }


@dataclass
class MetricReport:
    names: list
    rows: list
    means: dict
    count: int
    empty_gt: list = field(default_factory=list)
    threshold: float = 0.5
    morph: str = "none"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# threshold={self.threshold:.6f} morph={self.morph}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("image",) + COLUMNS)
        for name, row in zip(self.names, self.rows):
            writer.writerow([name] + [f"{row[c]:.6f}" for c in COLUMNS])
        writer.writerow(["MEAN"] + [f"{self.means[c]:.6f}" for c in COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def evaluate_dataset(
    pairs: Sequence,
    threshold: float = 0.5,
    names: Optional[Iterable[str]] = None,
    morph: str = "none",
) -> MetricReport:
    """Per-image metrics and their unweighted means.

    ``pairs`` holds :class:`MaskPair` objects or ``(pred, gt)`` tuples.
    Means use ``math.fsum`` so the report does not depend on input order.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_dataset needs at least one pair")
    pairs = [p if isinstance(p, MaskPair) else MaskPair(*p) for p in pairs]
    names = list(names) if names is not None else [p.name or f"img{i:04d}" for i, p in enumerate(pairs)]
    rows = [evaluate_pair(p.pred, p.gt, threshold) for p in pairs]
    means = {c: math.fsum(r[c] for r in rows) / len(rows) for c in COLUMNS}
    empty = [n for n, p in zip(names, pairs) if not p.gt.any()]
    return MetricReport(names, rows, means, len(rows), empty, threshold, morph)
