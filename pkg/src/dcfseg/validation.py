"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

from typing import Optional

import numpy as np

UNLABELED = -1


def check_image_stack(X, name: str = "X") -> np.ndarray:
    """Coerce to a float32 (n, H, W) stack with network-compatible dims."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n_samples, height, width), got shape {arr.shape}")
    n, h, w = arr.shape
    if n == 0:
        raise ValueError(f"{name} is empty")
    if h % 4 or w % 4:
        raise ValueError(f"{name} spatial dims must be divisible by 4, got {h}x{w}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_mask_targets(y, images: np.ndarray,
                       allow_unlabeled: bool = True) -> list[Optional[np.ndarray]]:
    """Per-sample boolean masks; an all--1 target marks a sample unlabeled.

    Returns a list aligned with ``images`` whose entries are (H, W) boolean
    arrays, or None for unlabeled samples.
    """
    arr = np.asarray(y)
    if arr.shape != images.shape:
        raise ValueError(f"y shape {arr.shape} does not match X shape {images.shape}")
    out: list[Optional[np.ndarray]] = []
    for i, target in enumerate(arr):
        if (target == UNLABELED).all():
            if not allow_unlabeled:
                raise ValueError(f"y[{i}] is unlabeled but unlabeled targets are not allowed here")
            out.append(None)
            continue
        values = np.unique(target)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(
                f"y[{i}] must be a binary mask (or all {UNLABELED} for unlabeled), got values {values}")
        out.append(target.astype(bool))
    if all(m is None for m in out):
        raise ValueError("y marks every sample unlabeled; at least one labeled sample is required")
    return out
