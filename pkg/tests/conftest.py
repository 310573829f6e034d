"""Shared test helpers: float64 finite-difference gradient checking."""

from __future__ import annotations

import numpy as np
import pytest

from dcfseg.autodiff import Tape, Tensor4


def finite_diff_check(fn, arrays, h=1e-3, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``fn(tensors) -> scalar Tensor4`` is evaluated in float64 so the
    difference quotient at h=1e-3 is dominated by truncation, not roundoff.
    The relative error uses max(|analytic|, |numeric|, floor) as denominator
    so jointly-vanishing gradients compare as equal.
    """
    tape = Tape()
    leaves = [tape.watch(a, dtype=np.float64) for a in arrays]
    loss = fn(leaves)
    tape.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]

    def value(perturbed):
        return fn([Tensor4(a, dtype=np.float64) for a in perturbed]).item()

    worst = 0.0
    for ai, arr in enumerate(arrays):
        for idx in np.ndindex(arr.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[ai][idx] += h
            minus[ai][idx] -= h
            fd = (value(plus) - value(minus)) / (2.0 * h)
            ref = analytic[ai][idx]
            worst = max(worst, abs(ref - fd) / max(abs(ref), abs(fd), floor))
    return worst


def separated_uniform(rng, shape, low=-1.0, high=1.0, zero_gap=0.05, pool_gap=0.05):
    """Random tensor whose values avoid relu kinks and maxpool ties.

    Every entry keeps |x| > zero_gap, and within each 2x2 pooling window the
    top two values differ by more than pool_gap, so +-h perturbations cannot
    flip any branch during finite differencing.
    """
    b, c, hgt, wdt = shape
    for _ in range(1000):
        x = rng.uniform(low, high, size=shape)
        if (np.abs(x) <= zero_gap).any():
            continue
        if hgt % 2 == 0 and wdt % 2 == 0:
            win = x.reshape(b, c, hgt // 2, 2, wdt // 2, 2)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hgt // 2, wdt // 2, 4)
            top2 = np.sort(win, axis=-1)[..., -2:]
            if (top2[..., 1] - top2[..., 0] <= pool_gap).any():
                continue
        return x
    raise AssertionError("could not generate a separated tensor")


def random_probs(rng, shape, tie_gap=0.1, floor=0.05):
    """Normalized 2-class probability maps away from 0.5 ties and from 0/1.

    The floor keeps -log(p) well-conditioned so central differences at
    h=1e-3 stay within their quadratic truncation budget; the tie gap keeps
    argmax pseudo-labels stable under the same perturbations.
    """
    b, c, hgt, wdt = shape
    assert c == 2
    half_gap = tie_gap / 2.0
    lo = rng.uniform(floor, 0.5 - half_gap, size=(b, hgt, wdt))
    hi = rng.uniform(0.5 + half_gap, 1.0 - floor, size=(b, hgt, wdt))
    p_fg = np.where(rng.random((b, hgt, wdt)) < 0.5, lo, hi)
    return np.stack([1.0 - p_fg, p_fg], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
