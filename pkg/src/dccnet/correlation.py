"""4D correlation volumes, mutual nearest-neighbour filtering and
neighbourhood consensus.

Volumes are ``[h_a, w_a, h_b, w_b]`` arrays indexed ``(i, j, m, n)``.
Composite ops come as ``*_fwd`` (value plus cache) and ``*_bwd`` pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import DTYPE, EPS, Conv4DKernel, ShapeError, conv4d, conv4d_vjp


def _data(f) -> np.ndarray:
    return np.asarray(getattr(f, "data", f), dtype=DTYPE)


def raw_correlation(fa, fb) -> np.ndarray:
    a, b = _data(fa), _data(fb)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"channel mismatch: {a.shape[0]} vs {b.shape[0]}", axis="channels")
    d, ha, wa = a.shape
    _, hb, wb = b.shape
    return (a.reshape(d, -1).T @ b.reshape(d, -1)).reshape(ha, wa, hb, wb)


def raw_correlation_vjp(fa, fb, upstream):
    a, b = _data(fa), _data(fb)
    d = a.shape[0]
    up = upstream.reshape(a.shape[1] * a.shape[2], -1)
    da = (b.reshape(d, -1) @ up.T).reshape(a.shape)
    db = (a.reshape(d, -1) @ up).reshape(b.shape)
    return da, db


def exchange(c: np.ndarray) -> np.ndarray:
    """Swap source and target axes: ``(i, j, m, n) -> (m, n, i, j)``."""
    return np.ascontiguousarray(c.transpose(2, 3, 0, 1))


def mutual_nn_filter(c: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Rescale each score by its ratio to the source-slice and target-slice maxima.

    ``r = relu(c)``; ``out = r * (r / max_src) * (r / max_tgt)``. A slice max
    below ``eps`` zeroes the corresponding ratio.
    """
    return mutual_nn_fwd(c, eps)[0]


def mutual_nn_fwd(c: np.ndarray, eps: float = EPS):
    r = np.maximum(np.asarray(c, dtype=DTYPE), 0.0)
    max_src = r.max(axis=(0, 1), keepdims=True)  # per target (m, n)
    max_tgt = r.max(axis=(2, 3), keepdims=True)  # per source (i, j)
    inv_src = np.where(max_src < eps, 0.0, 1.0 / np.where(max_src < eps, 1.0, max_src))
    inv_tgt = np.where(max_tgt < eps, 0.0, 1.0 / np.where(max_tgt < eps, 1.0, max_tgt))
    # true divisions so slice maxima give ratios of exactly 1
    ratio_src = np.where(max_src < eps, 0.0, r / np.where(max_src < eps, 1.0, max_src))
    ratio_tgt = np.where(max_tgt < eps, 0.0, r / np.where(max_tgt < eps, 1.0, max_tgt))
    out = r * ratio_src * ratio_tgt
    return out, (c, r, inv_src, inv_tgt)


def mutual_nn_bwd(cache, upstream: np.ndarray) -> np.ndarray:
    c, r, inv_src, inv_tgt = cache
    ha, wa, hb, wb = r.shape
    dr = upstream * 3.0 * r * r * inv_src * inv_tgt
    common = upstream * r ** 3 * inv_src * inv_tgt
    # d/d(max) of 1/max = -1/max^2; routed to the first argmax of each slice
    g_src = -(common.sum(axis=(0, 1))) * inv_src[0, 0]
    g_tgt = -(common.sum(axis=(2, 3))) * inv_tgt[:, :, 0, 0]
    src_flat = r.reshape(ha * wa, hb * wb)
    arg_src = src_flat.argmax(axis=0)
    dr_flat = dr.reshape(ha * wa, hb * wb)
    dr_flat[arg_src, np.arange(hb * wb)] += g_src.reshape(-1)
    arg_tgt = src_flat.argmax(axis=1)
    dr_flat[np.arange(ha * wa), arg_tgt] += g_tgt.reshape(-1)
    return np.where(c > 0, dr, 0.0)


def mutual_nn_vjp(c, upstream, eps: float = EPS):
    return mutual_nn_bwd(mutual_nn_fwd(c, eps)[1], upstream)


@dataclass
class ConsensusParams:
    """Ordered 4D conv layers; channel plan must start and end at 1."""

    kernels: list[Conv4DKernel]

    def __post_init__(self):
        check_plan(self.kernels)

    @property
    def plan(self) -> list[int]:
        return [self.kernels[0].c_in] + [k.c_out for k in self.kernels]


def check_plan(kernels):
    if not kernels:
        raise ShapeError("conv stack needs at least one layer", axis="layers")
    if kernels[0].c_in != 1 or kernels[-1].c_out != 1:
        raise ShapeError("conv stack channel plan must start and end at 1", axis="channels")
    for n, (a, b) in enumerate(zip(kernels[:-1], kernels[1:])):
        if a.c_out != b.c_in:
            raise ShapeError(f"layer {n} emits {a.c_out} channels, layer {n + 1} expects {b.c_in}", axis=n + 1)


def conv_stack_fwd(c: np.ndarray, kernels):
    """``(conv4d -> relu)`` for every layer on a single-channel volume."""
    x = np.asarray(c, dtype=DTYPE)[None]
    inputs, pres = [], []
    for k in kernels:
        inputs.append(x)
        pre = conv4d(x, k)
        pres.append(pre)
        x = np.maximum(pre, 0.0)
    return x[0], (inputs, pres)


def conv_stack_bwd(cache, kernels, upstream):
    """Return ``(d_volume, [(d_weight, d_bias), ...])``."""
    inputs, pres = cache
    g = upstream[None]
    grads = [None] * len(kernels)
    for n in reversed(range(len(kernels))):
        g = np.where(pres[n] > 0, g, 0.0)
        g, dw, db = conv4d_vjp(inputs[n], kernels[n], g)
        grads[n] = (dw, db)
    return g[0], grads


def _kernels(p):
    return p.kernels if isinstance(p, ConsensusParams) else list(p)


def neighborhood_consensus_fwd(c: np.ndarray, p, symmetric: bool = True):
    kernels = _kernels(p)
    if np.ndim(c) != 4:
        raise ShapeError(f"correlation volume must be rank 4, got {np.ndim(c)}", axis="rank")
    out, cache_a = conv_stack_fwd(c, kernels)
    cache_b = None
    if symmetric:
        alt, cache_b = conv_stack_fwd(exchange(c), kernels)
        out = out + exchange(alt)
    return out, (cache_a, cache_b)


def neighborhood_consensus_bwd(cache, p, upstream):
    kernels = _kernels(p)
    cache_a, cache_b = cache
    dc, grads = conv_stack_bwd(cache_a, kernels, upstream)
    if cache_b is not None:
        dalt, grads_b = conv_stack_bwd(cache_b, kernels, exchange(upstream))
        dc = dc + exchange(dalt)
        grads = [(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(grads, grads_b)]
    return dc, grads


def neighborhood_consensus(c: np.ndarray, p, symmetric: bool = True) -> np.ndarray:
    """``N(c) + exchange(N(exchange(c)))`` with ``N`` the conv/relu stack."""
    return neighborhood_consensus_fwd(c, p, symmetric)[0]


def corr_pipeline_fwd(fa, fb, p, symmetric: bool = True):
    raw = raw_correlation(fa, fb)
    f1, c1 = mutual_nn_fwd(raw)
    nc, c2 = neighborhood_consensus_fwd(f1, p, symmetric)
    out, c3 = mutual_nn_fwd(nc)
    return out, (raw, c1, c2, c3)


def corr_pipeline_bwd(cache, p, upstream):
    """Return ``(d_raw, kernel grads)``; chain ``d_raw`` through
    :func:`raw_correlation_vjp` for feature gradients."""
    raw, c1, c2, c3 = cache
    g = mutual_nn_bwd(c3, upstream)
    g, grads = neighborhood_consensus_bwd(c2, p, g)
    g = mutual_nn_bwd(c1, g)
    return g, grads


def corr_pipeline(fa, fb, p, symmetric: bool = True) -> np.ndarray:
    return corr_pipeline_fwd(fa, fb, p, symmetric)[0]
