"""Differentiable primitives.

Every op computes its forward pass on numpy arrays, wraps the result in a
:class:`~umfa.tensor.Tensor` of the input dtype and, when recording, leaves a
backward closure on the active tape. Convolutions and Gram products
accumulate in float64 before rounding back to the storage dtype.
"""

from __future__ import annotations

import collections
import contextlib
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from umfa.tensor import Node, Tensor, active_tape, default_dtype

Scalar = Union[int, float]

# op name -> number of calls; read through count_ops()
_counters: list[collections.Counter] = []

# upper bound on elements of one im2col block (float64), keeps large images in memory
_COLS_BUDGET = 1 << 22


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def count_ops() -> Iterator[collections.Counter]:
    """Count op invocations inside the block, keyed by op name."""
    counter: collections.Counter = collections.Counter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    for c in _counters:
        c[op] += 1
    result = Tensor.wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(Node(op, inputs, result, backward))
    return result


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor.wrap(np.full((1,) * like.ndim, x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (n, c, h, w) tensor, got shape {x.shape}")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g / (2.0 * out),)

    return _emit("sqrt", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _emit("relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (x,), backward)


# ----------------------------------------------------------------------------
# reductions and reshapes
# ----------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements as a ``(1, 1, 1, 1)`` tensor."""
    total = x.data.sum(dtype=np.float64)
    out = np.full((1, 1, 1, 1), total, dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return _emit("sum", out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    """Mean of all elements as a ``(1, 1, 1, 1)`` tensor."""
    n = x.size
    out = np.full((1, 1, 1, 1), x.data.sum(dtype=np.float64) / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return _emit("mean", out, (x,), backward)


def mean_spatial(x: Tensor) -> Tensor:
    """Per-(n, c) mean over the spatial axes, keeping dims: ``(n, c, 1, 1)``."""
    _check4(x, "mean_spatial")
    hw = x.shape[2] * x.shape[3]
    out = (x.data.sum(axis=(2, 3), keepdims=True, dtype=np.float64) / hw).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to(g / hw, x.shape).astype(x.dtype),)

    return _emit("mean_spatial", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis, earlier arguments first."""
    if len(tensors) < 2:
        raise ShapeError("concat_channels needs at least two tensors")
    for t in tensors:
        _check4(t, "concat_channels")
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: cannot join shapes {first.shape} and {t.shape} "
                "(n, h and w must agree)"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat_channels", out, tensors, backward)


# ----------------------------------------------------------------------------
# spatial ops
# ----------------------------------------------------------------------------


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pooling.

    Gradients go to the first maximum in row-major window order on ties.
    """
    _check4(x, "maxpool2d")
    if window != 2:
        raise ValueError("only window=2 is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (np.arange(4) == idx[..., None]) * g[..., None]
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w).astype(x.dtype, copy=False),)

    return _emit("maxpool2d", np.ascontiguousarray(out), (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every pixel into a ``factor x factor`` block."""
    _check4(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", out, (x,), backward)


def _row_blocks(ho: int, row_elems: int) -> Iterator[tuple[int, int]]:
    step = max(1, _COLS_BUDGET // max(1, row_elems))
    for r0 in range(0, ho, step):
        yield r0, min(ho, r0 + step)


def _cols(xp: np.ndarray, r0: int, r1: int, k: int, stride: int, wo: int) -> np.ndarray:
    # im2col for output rows [r0, r1): (n * rows * wo, ci * k * k), float64
    rows = xp[:, :, r0 * stride:(r1 - 1) * stride + k]
    win = sliding_window_view(rows, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :, :wo]
    n, ci = xp.shape[:2]
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return win.reshape(n * (r1 - r0) * wo, ci * k * k).astype(np.float64)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, ``weight`` shaped ``(c_out, c_in, k, k)``."""
    _check4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (c_out, c_in, k, k), got {weight.shape}")
    n, ci, h, w = x.shape
    co, wci, k, _ = weight.shape
    if wci != ci:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {ci} channels but weight shape "
            f"{weight.shape} expects {wci}"
        )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {x.shape} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(co, ci * k * k).astype(np.float64)
    out = np.empty((n, ho, wo, co), dtype=np.float64)
    row_elems = n * wo * ci * k * k
    for r0, r1 in _row_blocks(ho, row_elems):
        cols = _cols(xp, r0, r1, k, stride, wo)
        out[:, r0:r1] = (cols @ wmat.T).reshape(n, r1 - r0, wo, co)
    if bias is not None:
        out += bias.data.astype(np.float64)
    result = np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64).transpose(0, 2, 3, 1)  # (n, ho, wo, co)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g64.sum(axis=(0, 1, 2)).astype(bias.dtype)
        if weight.requires_grad:
            acc = np.zeros((co, ci * k * k), dtype=np.float64)
            for r0, r1 in _row_blocks(ho, row_elems):
                cols = _cols(xp, r0, r1, k, stride, wo)
                acc += g64[:, r0:r1].reshape(-1, co).T @ cols
            gw = acc.reshape(weight.shape).astype(weight.dtype)
        if x.requires_grad:
            gxp = np.zeros((n, ci) + xp.shape[2:], dtype=np.float64)
            for r0, r1 in _row_blocks(ho, row_elems):
                dcols = (g64[:, r0:r1].reshape(-1, co) @ wmat).reshape(n, r1 - r0, wo, ci, k, k)
                dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
                base = r0 * stride
                for i in range(k):
                    for j in range(k):
                        gxp[
                            :, :,
                            base + i:base + i + (r1 - r0 - 1) * stride + 1:stride,
                            j:j + (wo - 1) * stride + 1:stride,
                        ] += dcols[..., i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = gxp.astype(x.dtype)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", result, inputs, backward)


# ----------------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------------


def channel_moments(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel mean and ``sqrt(population variance + eps)``."""
    mu = mean_spatial(x)
    centered = x - mu
    var = mean_spatial(centered * centered)
    return mu, sqrt(var + eps)


def gram(x: Tensor) -> Tensor:
    """Unnormalized Gram matrix ``F F^T`` per sample, ``(n, c, c)``."""
    _check4(x, "gram")
    n, c, h, w = x.shape
    f = x.data.reshape(n, c, h * w).astype(np.float64)
    out = (f @ f.transpose(0, 2, 1)).astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return (((g64 + g64.transpose(0, 2, 1)) @ f).reshape(x.shape).astype(x.dtype),)

    return _emit("gram", out, (x,), backward)


def constant(value, shape: Sequence[int]) -> Tensor:
    return Tensor.wrap(np.full(tuple(shape), value, dtype=default_dtype()))
