"""Minimal reverse-mode autodiff over dense rank-4 tensors.

Every value is a ``Tensor4`` wrapping a ``(batch, channels, height, width)``
float32 array.  Operations record their backward rule on a ``Tape``; calling
``Tape.backward`` on a scalar output walks the recorded nodes in reverse
creation order and accumulates gradients onto every tensor attached to that
tape.  Tensors participating in a tape must never be mutated in place.

Scalars are represented as ``(1, 1, 1, 1)`` tensors so that losses stay on
the tape all the way down to a single number.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor dimensions do not satisfy an operation's contract."""


class TapeStateError(RuntimeError):
    """Raised on invalid tape usage (consumed twice, mixed tapes, ...)."""


class Tensor4:
    """Dense rank-4 tensor, optionally attached to a tape.

    ``grad`` is populated by ``Tape.backward`` for every tensor attached to
    the tape that the loss depends on.
    """

    __slots__ = ("data", "tape", "grad")

    def __init__(self, data, tape: Optional["Tape"] = None, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 requires rank-4 data, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.grad: Optional[np.ndarray] = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got dims {self.dims}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor4":
        """Same data, no tape; shares the underlying array."""
        t = Tensor4.__new__(Tensor4)
        t.data = self.data
        t.tape = None
        t.grad = None
        return t

    def __repr__(self) -> str:
        return f"Tensor4(dims={self.dims}, taped={self.tape is not None})"

    # Arithmetic sugar; floats are lifted to scalar constants.
    def __add__(self, other):
        return add(self, _lift(other, self.data.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.data.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.data.dtype), _const(-1.0, self.data.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.data.dtype), mul(self, _const(-1.0, self.data.dtype)))

    def __truediv__(self, other):
        return div(self, _lift(other, self.data.dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, op: str, out: Tensor4, inputs: Sequence[Tensor4],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Records operations for one backward pass.

    The node list is a topological order by construction (nodes are appended
    as their outputs are created), so the backward walk simply visits it in
    reverse.  A tape can be consumed exactly once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def watch(self, data, dtype=np.float32) -> Tensor4:
        """Create a leaf tensor attached to this tape."""
        return Tensor4(data, tape=self, dtype=dtype)

    def backward(self, loss: Tensor4) -> None:
        """Accumulate d(loss)/d(tensor) onto every tensor of this tape.

        ``loss`` must be a scalar produced by operations recorded here.  The
        tape is cleared afterwards and cannot be reused.
        """
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward()")
        if loss.tape is not self:
            raise TapeStateError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got dims {loss.dims}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or inp.tape is not self:
                    continue
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi
        self.nodes.clear()


def _lift(x, dtype) -> Tensor4:
    if isinstance(x, Tensor4):
        return x
    return _const(float(x), dtype)


def _const(value: float, dtype=np.float32) -> Tensor4:
    return Tensor4(np.full((1, 1, 1, 1), value, dtype=dtype))


def constant(value: float, dtype=np.float32) -> Tensor4:
    """Scalar constant tensor (never taped)."""
    return _const(value, dtype)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor4],
            backward_fn) -> Tensor4:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeStateError(f"{op}: inputs come from different tapes")
    out = Tensor4(out_data, tape=tape, dtype=out_data.dtype)
    if tape is not None:
        if tape.consumed:
            raise TapeStateError(f"{op}: tape already consumed")
        tape.nodes.append(_Node(op, out, inputs, backward_fn))
    return out


def _needs(t: Tensor4) -> bool:
    return t.tape is not None


def _is_scalar(t: Tensor4) -> bool:
    return t.data.shape == (1, 1, 1, 1)


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    # only scalar-vs-full broadcasting is supported
    return grad.sum(dtype=grad.dtype).reshape(1, 1, 1, 1)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.dims != b.dims and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"add: incompatible dims {a.dims} vs {b.dims}")
    out = a.data + b.data
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (_reduce_to(g, a.dims) if na else None,
                _reduce_to(g, b.dims) if nb else None)

    return _record("add", out, (a, b), backward)


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.dims != b.dims and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"mul: incompatible dims {a.dims} vs {b.dims}")
    out = a.data * b.data
    na, nb = _needs(a), _needs(b)
    a_data, b_data = a.data, b.data

    def backward(g):
        return (_reduce_to(g * b_data, a_data.shape) if na else None,
                _reduce_to(g * a_data, b_data.shape) if nb else None)

    return _record("mul", out, (a, b), backward)


def div(a: Tensor4, b: Tensor4) -> Tensor4:
    """Divide by a scalar tensor (all the losses need)."""
    if not _is_scalar(b):
        raise ShapeError(f"div: denominator must be scalar, got dims {b.dims}")
    out = a.data / b.data
    na, nb = _needs(a), _needs(b)
    a_data, b_val = a.data, b.data

    def backward(g):
        ga = g / b_val if na else None
        gb = -(g * a_data).sum(dtype=g.dtype).reshape(1, 1, 1, 1) / (b_val * b_val) if nb else None
        return (ga, gb)

    return _record("div", out, (a, b), backward)


def sum_all(x: Tensor4) -> Tensor4:
    out = x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1)
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(g.dtype, copy=False),)

    return _record("sum_all", out, (x,), backward)


def log(x: Tensor4) -> Tensor4:
    out = np.log(x.data)
    x_data = x.data

    def backward(g):
        return (g / x_data,)

    return _record("log", out, (x,), backward)


def clamp(x: Tensor4, lo: float, hi: float) -> Tensor4:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _record("clamp", out, (x,), backward)


def relu(x: Tensor4) -> Tensor4:
    out = np.maximum(x.data, 0)
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return _record("relu", out, (x,), backward)


def softmax_channels(x: Tensor4) -> Tensor4:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.dims[1] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels, got {x.dims[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return _record("softmax_channels", p, (x,), backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.dims[0] != b.dims[0] or a.dims[2:] != b.dims[2:]:
        raise ShapeError(f"concat_channels: incompatible dims {a.dims} vs {b.dims}")
    out = np.concatenate((a.data, b.data), axis=1)
    ca = a.dims[1]
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (g[:, :ca] if na else None, g[:, ca:] if nb else None)

    return _record("concat_channels", out, (a, b), backward)


def slice_channels(x: Tensor4, start: int, stop: int) -> Tensor4:
    if not (0 <= start < stop <= x.dims[1]):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.dims[1]} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_channels", out, (x,), backward)


def slice_batch(x: Tensor4, start: int, stop: int) -> Tensor4:
    if not (0 <= start < stop <= x.dims[0]):
        raise ShapeError(f"slice_batch: [{start}:{stop}] out of range for batch {x.dims[0]}")
    out = np.ascontiguousarray(x.data[start:stop])
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record("slice_batch", out, (x,), backward)


def upsample_nearest2x(x: Tensor4) -> Tensor4:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.dims

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5), dtype=g.dtype),)

    return _record("upsample_nearest2x", out, (x,), backward)


def maxpool2x2(x: Tensor4) -> Tensor4:
    """2x2 max pooling, stride 2; gradient goes to the argmax position,
    ties broken by the first index in row-major scan order."""
    b, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    am = windows.argmax(axis=-1)  # first max wins
    out = np.take_along_axis(windows, am[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, am[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(b, c, h, w),)

    return _record("maxpool2x2", out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(b, c, h, w) -> contiguous (b, c*k*k, ho*wo) patch matrix, stride 1."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))           # (b, c, ho, wo, k, k)
    return np.ascontiguousarray(
        win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo))


def conv2d(x: Tensor4, weight: Tensor4, bias: Tensor4, padding: int) -> Tensor4:
    """Stride-1 2D convolution with square odd kernels.

    weight dims: (out_channels, in_channels, k, k); bias dims (1, out_channels, 1, 1).
    padding = (k-1)//2 preserves the spatial dims.
    """
    b, cin, h, w = x.dims
    cout, wcin, k, k2 = weight.dims
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {wcin}")
    if bias.dims != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias dims {bias.dims} != (1, {cout}, 1, 1)")
    if not 0 <= padding <= k - 1:
        raise ShapeError(f"conv2d: padding {padding} outside [0, {k - 1}]")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {k} too large for padded {h}x{w} input")

    cols = _im2col(x.data, k, padding)                           # (b, cin*k*k, ho*wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = (wmat @ cols).reshape(b, cout, ho, wo) + bias.data

    nx, nw, nb_ = _needs(x), _needs(weight), _needs(bias)

    def backward(g):
        gm = g.reshape(b, cout, ho * wo)
        gw = gb = gx = None
        if nw:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, k, k)
        if nb_:
            gb = g.sum(axis=(0, 2, 3), dtype=g.dtype).reshape(1, cout, 1, 1)
        if nx:
            # dx is the transposed convolution: correlate g with the rotated
            # kernel at complementary padding k-1-padding (stride-1 identity).
            wrot = np.ascontiguousarray(
                weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, cout * k * k)
            gcols = _im2col(np.ascontiguousarray(g), k, k - 1 - padding)
            gx = (wrot @ gcols).reshape(b, cin, h, w)
        return (gx, gw, gb)

    return _record("conv2d", out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# parameter vectors


class ParamVector:
    """Flat ordered collection of named rank-4 float32 arrays.

    The unit of EMA and weight-distance arithmetic; teacher and students hold
    structurally identical vectors (same names, same dims, same order).
    """

    __slots__ = ("names", "arrays")

    def __init__(self, names: Sequence[str], arrays: Sequence[np.ndarray]):
        if len(names) != len(arrays):
            raise ShapeError("ParamVector: names and arrays length mismatch")
        self.names = list(names)
        self.arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
        for name, a in zip(self.names, self.arrays):
            if a.ndim != 4:
                raise ShapeError(f"ParamVector segment {name!r} must be rank-4, got {a.shape}")

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self.arrays)

    def structure(self) -> tuple:
        return tuple((n, a.shape) for n, a in zip(self.names, self.arrays))

    def same_structure(self, other: "ParamVector") -> bool:
        return self.structure() == other.structure()

    def copy(self) -> "ParamVector":
        return ParamVector(self.names, [a.copy() for a in self.arrays])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def watch_all(self, tape: Tape) -> list[Tensor4]:
        """Leaf tensors for every segment, attached to the given tape."""
        return [tape.watch(a) for a in self.arrays]

    def __len__(self) -> int:
        return len(self.arrays)

    def __repr__(self) -> str:
        return f"ParamVector({len(self.arrays)} segments, total_len={self.total_len})"


def collect_grads(leaves: Sequence[Tensor4]) -> list[np.ndarray]:
    """Gradients of watched leaves after backward(); zeros where untouched."""
    out = []
    for leaf in leaves:
        if leaf.grad is None:
            out.append(np.zeros_like(leaf.data))
        else:
            out.append(leaf.grad)
    return out
