"""Dense array primitives with forward and vector-Jacobian products.

Arrays are plain ``numpy.ndarray`` values in float64, channel-first and
row-major. Every differentiable primitive has a matching ``*_vjp`` that maps
an upstream cotangent (same shape as the forward output) back to its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

DTYPE = np.float64
EPS = 1e-12

# Max elements materialized per im2col block in conv4d.
_BLOCK_ELEMS = 1 << 22


class ShapeError(ValueError):
    """Raised when an argument has the wrong extent along some axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


class NoBackwardError(KeyError):
    pass


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim < 1 or arr.ndim > 6:
        raise ShapeError(f"tensor rank must be 1..6, got {arr.ndim}", axis="rank")
    if arr.size == 0:
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}", axis="extent")
    return arr


@dataclass(frozen=True)
class Conv4DKernel:
    """Weights ``[c_out, c_in, k1, k2, k3, k4]`` and bias ``[c_out]``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=DTYPE)
        b = np.asarray(self.bias, dtype=DTYPE)
        if w.ndim != 6:
            raise ShapeError(f"conv4d weight must be rank 6, got {w.ndim}", axis="rank")
        if any(k % 2 == 0 for k in w.shape[2:]):
            raise ShapeError(f"conv4d kernel extents must be odd, got {w.shape[2:]}", axis="kernel")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match c_out={w.shape[0]}", axis="c_out")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def ksize(self) -> tuple[int, int, int, int]:
        return tuple(self.weight.shape[2:])

    @classmethod
    def delta(cls, c_in: int, c_out: int, k: int = 3) -> "Conv4DKernel":
        """Center-tap kernel routing input channel ``o`` to output channel ``o``."""
        w = np.zeros((c_out, c_in, k, k, k, k), dtype=DTYPE)
        h = k // 2
        for o in range(min(c_in, c_out)):
            w[o, o, h, h, h, h] = 1.0
        return cls(w, np.zeros(c_out, dtype=DTYPE))


def _check_conv_args(x: np.ndarray, kernel: Conv4DKernel):
    if x.ndim != 5:
        raise ShapeError(f"conv4d input must be [c, A, B, C, D], got rank {x.ndim}", axis="rank")
    if x.shape[0] != kernel.c_in:
        raise ShapeError(
            f"conv4d channel mismatch: input has {x.shape[0]}, kernel expects {kernel.c_in}",
            axis="c_in",
        )


def _pad4(x: np.ndarray, ksize) -> np.ndarray:
    pads = [(0, 0)] + [(k // 2, k // 2) for k in ksize]
    return np.pad(x, pads)


def _tap_blocks(n_taps: int, per_tap: int):
    step = max(1, _BLOCK_ELEMS // max(per_tap, 1))
    for start in range(0, n_taps, step):
        yield start, min(n_taps, start + step)


def conv4d(x: np.ndarray, kernel: Conv4DKernel) -> np.ndarray:
    """Same-size 4D convolution (cross-correlation) with zero padding.

    ``out[o, p] = bias[o] + sum_{c, t} w[o, c, t] * x_pad[c, p + t]``.
    Kernel taps are processed in blocks; each block is one GEMM over the
    gathered shifted windows.
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_conv_args(x, kernel)
    c_in, *spatial = x.shape
    xp = _pad4(x, kernel.ksize)
    taps = list(product(*(range(k) for k in kernel.ksize)))
    n_pos = int(np.prod(spatial))
    w = kernel.weight.reshape(kernel.c_out, c_in, len(taps))
    out = np.zeros((kernel.c_out, n_pos), dtype=DTYPE)
    A, B, C, D = spatial
    for t0, t1 in _tap_blocks(len(taps), c_in * n_pos):
        cols = np.empty((t1 - t0, c_in, n_pos), dtype=DTYPE)
        for s, (a, b, c, d) in enumerate(taps[t0:t1]):
            cols[s] = xp[:, a:a + A, b:b + B, c:c + C, d:d + D].reshape(c_in, n_pos)
        wblk = w[:, :, t0:t1].transpose(0, 2, 1).reshape(kernel.c_out, -1)
        out += wblk @ cols.reshape(-1, n_pos)
    out += kernel.bias[:, None]
    return out.reshape(kernel.c_out, *spatial)


def conv4d_vjp(x: np.ndarray, kernel: Conv4DKernel, upstream: np.ndarray):
    """Return ``(d_input, d_weight, d_bias)`` for :func:`conv4d`."""
    x = np.asarray(x, dtype=DTYPE)
    _check_conv_args(x, kernel)
    c_in, *spatial = x.shape
    expected = (kernel.c_out, *spatial)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {expected}", axis="upstream")
    xp = _pad4(x, kernel.ksize)
    dxp = np.zeros_like(xp)
    taps = list(product(*(range(k) for k in kernel.ksize)))
    n_pos = int(np.prod(spatial))
    up = upstream.reshape(kernel.c_out, n_pos)
    w = kernel.weight.reshape(kernel.c_out, c_in, len(taps))
    dw = np.empty_like(w)
    A, B, C, D = spatial
    for t0, t1 in _tap_blocks(len(taps), c_in * n_pos):
        nt = t1 - t0
        cols = np.empty((nt, c_in, n_pos), dtype=DTYPE)
        for s, (a, b, c, d) in enumerate(taps[t0:t1]):
            cols[s] = xp[:, a:a + A, b:b + B, c:c + C, d:d + D].reshape(c_in, n_pos)
        dw[:, :, t0:t1] = (up @ cols.reshape(-1, n_pos).T).reshape(kernel.c_out, nt, c_in).transpose(0, 2, 1)
        wblk = w[:, :, t0:t1].transpose(0, 2, 1).reshape(kernel.c_out, -1)
        dcols = (wblk.T @ up).reshape(nt, c_in, *spatial)
        for s, (a, b, c, d) in enumerate(taps[t0:t1]):
            dxp[:, a:a + A, b:b + B, c:c + C, d:d + D] += dcols[s]
    ha, hb, hc, hd = (k // 2 for k in kernel.ksize)
    dx = dxp[:, ha:ha + A, hb:hb + B, hc:hc + C, hd:hd + D]
    return np.ascontiguousarray(dx), dw.reshape(kernel.weight.shape), up.sum(axis=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, upstream, 0.0)


def softmax_axis(x: np.ndarray, axis: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax_axis received non-finite input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(x: np.ndarray, upstream: np.ndarray, axis: int = 0) -> np.ndarray:
    p = softmax_axis(x, axis)
    return p * (upstream - (upstream * p).sum(axis=axis, keepdims=True))


def l2_normalize_channels(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Unit-normalize every spatial column of a ``[d, ...]`` array.

    Columns whose norm is below ``eps`` come back as zero.
    """
    x = np.asarray(x, dtype=DTYPE)
    norm = np.sqrt((x * x).sum(axis=0, keepdims=True))
    safe = np.where(norm < eps, 1.0, norm)
    return np.where(norm < eps, 0.0, x / safe)


def l2_normalize_vjp(x: np.ndarray, upstream: np.ndarray, eps: float = EPS) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    norm = np.sqrt((x * x).sum(axis=0, keepdims=True))
    alive = norm >= eps
    safe = np.where(alive, norm, 1.0)
    y = x / safe
    g = (upstream - y * (upstream * y).sum(axis=0, keepdims=True)) / safe
    return np.where(alive, g, 0.0)


def matmul_vjp(a: np.ndarray, b: np.ndarray, upstream: np.ndarray):
    """Cotangents of ``a @ b`` for 2D operands."""
    return upstream @ b.T, a.T @ upstream


def _conv4d_vjp_entry(x, kernel, upstream):
    return conv4d_vjp(x, kernel, upstream)


_VJP = {
    "conv4d": _conv4d_vjp_entry,
    "relu": relu_vjp,
    "softmax_axis": softmax_vjp,
    "l2_normalize_channels": l2_normalize_vjp,
    "matmul": matmul_vjp,
}


def register_vjp(name: str, fn):
    _VJP[name] = fn


def vjp(op: str, *inputs, upstream, **kwargs):
    """Dispatch to the registered backward of ``op``.

    >>> vjp("relu", np.array([1.0, -1.0]), upstream=np.array([2.0, 3.0]))
    array([2., 0.])
    """
    try:
        fn = _VJP[op]
    except KeyError:
        raise NoBackwardError(f"no backward registered for op {op!r}") from None
    return fn(*inputs, upstream, **kwargs)
