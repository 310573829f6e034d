"""Differentiable training losses and the total-objective assembly.

The supervised loss is cross-entropy plus soft Dice, equally weighted.  The
unsupervised side combines cross-pseudo supervision between the two students
and a mentoring term that lets the teacher steer an underperforming student;
both supervise against hardened (argmax) pseudo-labels, through which no
gradient ever flows.  Their weight follows a Gaussian ramp so early, noisy
predictions cannot destabilize training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor4, clamp, log, mul, slice_channels, sum_all

DICE_EPS = 1e-5
CE_EPS = 1e-7


@dataclass
class RampSchedule:
    """Gaussian ramp for the unsupervised-loss weight."""

    lambda_max: float = 1.0
    ramp_iters: int = 1600


def ramp_lambda(iteration: int, schedule: RampSchedule) -> float:
    """lambda_max * exp(-5 * (1 - min(iter/ramp_iters, 1))^2); monotone in iter."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if schedule.ramp_iters <= 0:
        return schedule.lambda_max
    frac = min(iteration / schedule.ramp_iters, 1.0)
    return schedule.lambda_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def _truth_batch(truth, dims) -> np.ndarray:
    t = np.asarray(truth)
    if t.ndim == 2:
        t = t[None]
    t = t.astype(bool, copy=False)
    b, c, h, w = dims
    if t.shape != (b, h, w):
        raise ShapeError(f"truth masks {t.shape} do not match probs {dims}")
    return t


def harden(probs: Tensor4) -> np.ndarray:
    """Per-pixel argmax pseudo-label, (B, H, W) bool; ties go to class 0.

    The result is detached data: using it as a target blocks all gradient
    flow through the hardened side.
    """
    return probs.data.argmax(axis=1).astype(bool)


def dice_loss(probs: Tensor4, truth) -> Tensor4:
    """Soft Dice loss on the foreground channel, summed over the batch."""
    t = _truth_batch(truth, probs.dims)
    dt = probs.data.dtype
    p_fg = slice_channels(probs, 1, 2)
    g = Tensor4(t[:, None].astype(dt), dtype=dt)
    inter = sum_all(mul(p_fg, g))
    denom = sum_all(p_fg) + float(t.sum())
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def ce_loss(probs: Tensor4, truth) -> Tensor4:
    """Mean cross-entropy of the true-class probability, clamped inside the log."""
    t = _truth_batch(truth, probs.dims)
    b, c, h, w = probs.dims
    if c != 2:
        raise ShapeError(f"ce_loss expects 2 classes, got {c}")
    dt = probs.data.dtype
    onehot = np.zeros((b, c, h, w), dtype=dt)
    onehot[:, 1][t] = 1
    onehot[:, 0][~t] = 1
    picked = sum_all(mul(log(clamp(probs, CE_EPS, 1.0 - CE_EPS)), Tensor4(onehot, dtype=dt)))
    return picked * (-1.0 / (b * h * w))


def seg_loss(probs: Tensor4, truth) -> Tensor4:
    """Supervised segmentation loss: cross-entropy + Dice, equally weighted."""
    return ce_loss(probs, truth) + dice_loss(probs, truth)


def cps_loss(probs_s1: Tensor4, probs_s2: Tensor4) -> Tensor4:
    """Cross-pseudo supervision: each student learns the other's hard labels."""
    if probs_s1.dims != probs_s2.dims:
        raise ShapeError(f"cps_loss: dims differ {probs_s1.dims} vs {probs_s2.dims}")
    return seg_loss(probs_s1, harden(probs_s2)) + seg_loss(probs_s2, harden(probs_s1))


def ms_loss(probs_us: Tensor4, teacher_probs: Tensor4) -> Tensor4:
    """Mentoring loss: the underperforming student learns the teacher's hard labels."""
    if probs_us.dims != teacher_probs.dims:
        raise ShapeError(f"ms_loss: dims differ {probs_us.dims} vs {teacher_probs.dims}")
    return seg_loss(probs_us, harden(teacher_probs))


@dataclass
class LossReport:
    """Scalar summary of one student's objective for one iteration."""

    l_seg: float
    l_cps: float
    l_ms: float
    lam: float
    l_total: float


def total_loss(l_seg: float, l_cps: float, l_ms: float, lam: float) -> LossReport:
    """Assemble l_seg + lam * (l_cps + l_ms) into a report.

    The mentoring component applies only to the student it was assigned to;
    callers pass l_ms = 0 for the other one.
    """
    parts = {"l_seg": l_seg, "l_cps": l_cps, "l_ms": l_ms, "lambda": lam}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite loss component {name} = {value}")
    return LossReport(l_seg=l_seg, l_cps=l_cps, l_ms=l_ms, lam=lam,
                      l_total=l_seg + lam * (l_cps + l_ms))
