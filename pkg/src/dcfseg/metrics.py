"""Evaluation and competition metrics for binary masks.

Dice and Jaccard are region-overlap scores; 95HD and ASD are edge-sensitive
surface distances computed between the masks' boundary point sets.  The fast
surface-distance path rides on an exact Euclidean distance transform; the
module also ships the O(n^2) all-pairs oracle so the two can be checked
against each other.

A mask is a 2-D boolean array.  Surface pixels are mask pixels with at least
one 4-neighbour outside the mask; the grid border counts as outside.
Euclidean distances are measured between pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import ShapeError

CE_EPS = 1e-7


class UndefinedMetric(ValueError):
    """Surface distance is undefined because a mask has no pixels.

    ``side`` names the offending argument: "pred", "truth" or "both".
    """

    def __init__(self, side: str):
        super().__init__(f"surface distance undefined: {side} mask is empty")
        self.side = side


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = _as_mask(pred), _as_mask(truth)
    if p.shape != t.shape:
        raise ShapeError(f"mask dims differ: {p.shape} vs {t.shape}")
    return p, t


def dice_score(pred, truth) -> float:
    """2 * |intersection| / (|A| + |B|); two empty masks score 1.0."""
    p, t = _check_pair(pred, truth)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def jaccard_score(pred, truth) -> float:
    """|intersection| / |union|; two empty masks score 1.0."""
    p, t = _check_pair(pred, truth)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the sorted value at index ceil(q*n) - 1."""
    vals = list(values)
    if not vals:
        raise ValueError("percentile of empty list")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    vals.sort()
    idx = max(math.ceil(q * len(vals)) - 1, 0)
    return float(vals[idx])


def surface(mask) -> np.ndarray:
    """Boolean map of surface pixels (4-connectivity, border is outside)."""
    m = _as_mask(mask)
    pad = np.pad(m, 1, constant_values=False)
    interior = (pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:])
    return m & ~interior


def _directed_distances(src_surface: np.ndarray, dst_surface: np.ndarray) -> np.ndarray:
    """d(a, B) for every surface pixel a of the source, via exact EDT."""
    dt = ndimage.distance_transform_edt(~dst_surface)
    return dt[src_surface]


def _surface_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = _check_pair(pred, truth)
    p_empty, t_empty = not p.any(), not t.any()
    if p_empty or t_empty:
        raise UndefinedMetric("both" if p_empty and t_empty else ("pred" if p_empty else "truth"))
    return surface(p), surface(t)


def hd95(pred, truth) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask surfaces."""
    sp, st = _surface_pair(pred, truth)
    d_pt = _directed_distances(sp, st)
    d_tp = _directed_distances(st, sp)
    return max(percentile(d_pt, 0.95), percentile(d_tp, 0.95))


def asd(pred, truth) -> float:
    """Mean of the two directed average surface distances."""
    sp, st = _surface_pair(pred, truth)
    d_pt = _directed_distances(sp, st)
    d_tp = _directed_distances(st, sp)
    return (float(d_pt.mean()) + float(d_tp.mean())) / 2.0


# -- brute-force oracles -----------------------------------------------------


def _allpairs_directed(src_surface: np.ndarray, dst_surface: np.ndarray) -> np.ndarray:
    src = np.argwhere(src_surface).astype(np.float64)
    dst = np.argwhere(dst_surface).astype(np.float64)
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def hd95_bruteforce(pred, truth) -> float:
    """All-pairs nearest-distance reference for :func:`hd95`."""
    sp, st = _surface_pair(pred, truth)
    return max(percentile(_allpairs_directed(sp, st), 0.95),
               percentile(_allpairs_directed(st, sp), 0.95))


def asd_bruteforce(pred, truth) -> float:
    """All-pairs nearest-distance reference for :func:`asd`."""
    sp, st = _surface_pair(pred, truth)
    return (float(_allpairs_directed(sp, st).mean())
            + float(_allpairs_directed(st, sp).mean())) / 2.0


# -- probability-based metric ------------------------------------------------


def ce_metric(probs: np.ndarray, truth: np.ndarray) -> float:
    """Mean cross-entropy (nats) of per-pixel class probabilities vs truth.

    ``probs`` is (batch, classes, H, W); ``truth`` is a (batch, H, W) or
    (H, W) boolean mask of the foreground class.  Probabilities are clamped
    to [eps, 1-eps] inside the log.
    """
    p = np.asarray(probs)
    t = np.asarray(truth).astype(bool)
    if t.ndim == 2:
        t = t[None]
    if p.ndim != 4 or t.ndim != 3 or p.shape[0] != t.shape[0] or p.shape[2:] != t.shape[1:]:
        raise ShapeError(f"ce_metric: probs {p.shape} vs truth {t.shape}")
    p_true = np.where(t, p[:, 1], p[:, 0])
    return float(-np.log(np.clip(p_true.astype(np.float64), CE_EPS, 1.0 - CE_EPS)).mean())


@dataclass
class MetricReport:
    """Per-image evaluation row; distance fields are None when undefined."""

    dice: float
    jaccard: float
    hd95: Optional[float]
    asd: Optional[float]
    ce: Optional[float] = None


def evaluate_mask(pred, truth, probs: Optional[np.ndarray] = None) -> MetricReport:
    """All metrics for one prediction; undefined distances become None."""
    p, t = _check_pair(pred, truth)
    try:
        h = hd95(p, t)
        a = asd(p, t)
    except UndefinedMetric:
        h = a = None
    ce = None
    if probs is not None:
        ce = ce_metric(probs[None] if probs.ndim == 3 else probs, t[None])
    return MetricReport(dice=dice_score(p, t), jaccard=jaccard_score(p, t),
                        hd95=h, asd=a, ce=ce)
