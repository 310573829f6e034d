"""Reference tiny encoder-decoder segmentation network.

Fixed architecture shared by the teacher and both students: single-channel
input, two output classes, one skip connection from the first encoder stage
so boundary detail survives the downsampling path.  Spatial dims must be
divisible by 4 (two pooling stages).
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    ParamVector,
    ShapeError,
    Tape,
    Tensor4,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    softmax_channels,
    upsample_nearest2x,
)

INPUT_CHANNELS = 1
CLASS_COUNT = 2

# (name, out_channels, in_channels, kernel) for each conv stage, in forward order.
_LAYERS = (
    ("enc1", 8, INPUT_CHANNELS, 3),
    ("enc2", 16, 8, 3),
    ("enc3", 16, 16, 3),
    ("dec1", 8, 16, 3),
    ("dec2", 8, 16, 3),
    ("head", CLASS_COUNT, 8, 1),
)

CHECKPOINT_MAGIC = b"DCF1"


class CheckpointError(ValueError):
    """Raised for unreadable or structurally invalid checkpoint files."""


def init_params(seed: int) -> ParamVector:
    """Fresh parameters: Glorot-uniform kernels, zero biases.

    Same seed gives bit-identical vectors; different seeds give different ones.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    names, arrays = [], []
    for name, cout, cin, k in _LAYERS:
        fan_in, fan_out = cin * k * k, cout * k * k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        b = np.zeros((1, cout, 1, 1), dtype=np.float32)
        names += [f"{name}.weight", f"{name}.bias"]
        arrays += [w, b]
    return ParamVector(names, arrays)


def _check_input(x: Tensor4) -> None:
    _, c, h, w = x.dims
    if c != INPUT_CHANNELS:
        raise ShapeError(f"network expects {INPUT_CHANNELS} input channel, got {c}")
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")


def forward_leaves(leaves: Sequence[Tensor4], x: Tensor4) -> Tensor4:
    """Forward pass through already-watched parameter tensors.

    ``leaves`` is ordered like the ParamVector from :func:`init_params`; the
    same leaves may be reused across several forward calls so gradients
    accumulate into one slot per segment.
    """
    _check_input(x)
    (w1, b1, w2, b2, w3, b3, w4, b4, w5, b5, w6, b6) = leaves
    a1 = relu(conv2d(x, w1, b1, padding=1))          # full res, skip source
    h = maxpool2x2(a1)
    h = relu(conv2d(h, w2, b2, padding=1))           # half res
    h = maxpool2x2(h)
    h = relu(conv2d(h, w3, b3, padding=1))           # quarter res
    h = upsample_nearest2x(h)
    h = relu(conv2d(h, w4, b4, padding=1))           # half res
    h = upsample_nearest2x(h)
    h = concat_channels(h, a1)
    h = relu(conv2d(h, w5, b5, padding=1))           # full res
    logits = conv2d(h, w6, b6, padding=0)
    return softmax_channels(logits)


def forward(params: ParamVector, x: Tensor4, tape: Optional[Tape] = None) -> Tensor4:
    """Per-pixel class probabilities for ``x``.

    Without a tape this is the pure inference path (no gradient state is
    created).  With a tape, gradients land on tensors created internally; use
    ``params.watch_all`` + :func:`forward_leaves` when you need them.
    """
    if tape is None:
        leaves = [Tensor4(a) for a in params.arrays]
    else:
        leaves = params.watch_all(tape)
    return forward_leaves(leaves, x)


def predict_probs(params: ParamVector, images: np.ndarray) -> np.ndarray:
    """Inference on a (n, H, W) image stack; returns (n, 2, H, W) probabilities."""
    x = Tensor4(np.asarray(images, dtype=np.float32)[:, None, :, :])
    return forward(params, x).data


def predict_masks(params: ParamVector, images: np.ndarray) -> np.ndarray:
    """Hard foreground masks, (n, H, W) bool."""
    probs = predict_probs(params, images)
    return probs.argmax(axis=1).astype(bool)


# ---------------------------------------------------------------------------
# checkpoint format: magic "DCF1", then per segment
#   name length (u32 LE), name bytes, dim count (u32 LE), dims (u32 LE each),
#   raw f32 LE data


def save_checkpoint(params: ParamVector, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in zip(params.names, params.arrays):
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamVector:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    names, arrays = [], []
    off = 4
    total = len(blob)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > total:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    while off < total:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "dim count"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"data of {name!r}"), dtype="<f4")
        arrays.append(data.reshape(dims).astype(np.float32))
        names.append(name)
    if not names:
        raise CheckpointError(f"{path}: no segments")
    return ParamVector(names, arrays)
