"""Attention-based fusion of the local and context correlation volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import check_plan, conv_stack_bwd, conv_stack_fwd, exchange
from .tensor_core import DTYPE, Conv4DKernel, ShapeError, softmax_axis, softmax_vjp

FUSE_INPUTS = ("consensus", "embedded")


@dataclass
class EmbedParams:
    kernels: list[Conv4DKernel]

    def __post_init__(self):
        check_plan(self.kernels)


@dataclass
class AttentionParams:
    """1x1 conv from ``2 * N`` stacked correlation channels to 2 logits."""

    weight: np.ndarray  # [2, 2N]
    bias: np.ndarray  # [2]

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.weight.shape[0] != 2 or self.weight.shape[1] % 2:
            raise ShapeError(f"attention weight must be [2, 2N], got {self.weight.shape}", axis="weight")
        if self.bias.shape != (2,):
            raise ShapeError(f"attention bias must be [2], got {self.bias.shape}", axis="bias")

    @property
    def n_channels(self) -> int:
        return self.weight.shape[1] // 2


def corr_embed_fwd(c, p: EmbedParams):
    return conv_stack_fwd(c, p.kernels)


def corr_embed_bwd(cache, p: EmbedParams, upstream):
    return conv_stack_bwd(cache, p.kernels, upstream)


def corr_embed(c, p: EmbedParams) -> np.ndarray:
    """``relu(E(c))`` where ``E`` is the conv stack; extents are preserved."""
    return corr_embed_fwd(c, p)[0]


def reshape_dir(c: np.ndarray, direction: str = "ab") -> np.ndarray:
    """Flatten the opposite side into channels.

    ``ab``: ``[h_b * w_b, h_a, w_a]`` with channel ``m * w_b + n``.
    ``ba``: ``[h_a * w_a, h_b, w_b]`` with channel ``i * w_a + j``.
    """
    if direction == "ba":
        c = exchange(c)
    elif direction != "ab":
        raise ValueError(f"direction must be 'ab' or 'ba', got {direction!r}")
    h, w, ho, wo = c.shape
    return np.ascontiguousarray(c.reshape(h, w, ho * wo).transpose(2, 0, 1))


def unreshape_dir(d: np.ndarray, opposite: tuple[int, int], direction: str = "ab") -> np.ndarray:
    """Inverse of :func:`reshape_dir`; ``opposite`` is the flattened grid."""
    _, h, w = d.shape
    c = d.transpose(1, 2, 0).reshape(h, w, *opposite)
    return exchange(c) if direction == "ba" else np.ascontiguousarray(c)


def _logits(dl, ds, p: AttentionParams):
    if dl.shape != ds.shape:
        raise ShapeError(f"D_l {dl.shape} and D_s {ds.shape} differ", axis="shape")
    if dl.shape[0] != p.n_channels:
        raise ShapeError(
            f"attention expects {p.n_channels} channels per volume, got {dl.shape[0]}", axis="channels"
        )
    x = np.concatenate([dl, ds], axis=0).reshape(2 * dl.shape[0], -1)
    return x, p.weight @ x + p.bias[:, None]


def attention_mask(dl, ds, p: AttentionParams) -> np.ndarray:
    """Mask ``[h, w]`` in (0, 1): first softmax component of two logits."""
    return attention_probs(dl, ds, p)[0]


def attention_probs(dl, ds, p: AttentionParams) -> np.ndarray:
    _, z = _logits(dl, ds, p)
    return softmax_axis(z, axis=0).reshape(2, *dl.shape[1:])


def attention_mask_vjp(dl, ds, p: AttentionParams, upstream):
    """Return ``(d_dl, d_ds, d_weight, d_bias)`` for an upstream on the mask."""
    x, z = _logits(dl, ds, p)
    up = np.zeros_like(z)
    up[0] = upstream.reshape(-1)
    dz = softmax_vjp(z, up, axis=0)
    dx = (p.weight.T @ dz).reshape(2 * dl.shape[0], *dl.shape[1:])
    n = dl.shape[0]
    return dx[:n], dx[n:], dz @ x.T, dz.sum(axis=1)


def fuse(dl, ds, m) -> np.ndarray:
    """Convex blend ``dl * m + ds * (1 - m)``, ``m`` broadcast over channels."""
    m = np.asarray(m, dtype=DTYPE)[None]
    out = dl * m + ds * (1.0 - m)
    # the blend of equal values is that value; pin it against rounding
    return np.where(dl == ds, dl, out)


def fuse_vjp(dl, ds, m, upstream):
    m = np.asarray(m, dtype=DTYPE)
    return upstream * m[None], upstream * (1.0 - m[None]), (upstream * (dl - ds)).sum(axis=0)


@dataclass
class FusionResult:
    fused: dict  # direction -> 4D volume
    masks: dict  # direction -> [h, w] mask
    embedded: tuple  # (C~_l, C~_s)


def _direction_fwd(cl, cs, el, es, pa, direction, fuse_input):
    opposite = cl.shape[2:] if direction == "ab" else cl.shape[:2]
    al, as_ = reshape_dir(el, direction), reshape_dir(es, direction)
    if fuse_input == "embedded":
        bl, bs = al, as_
    else:
        bl, bs = reshape_dir(cl, direction), reshape_dir(cs, direction)
    m = attention_mask(al, as_, pa)
    fused = unreshape_dir(fuse(bl, bs, m), opposite, direction)
    return fused, m, (al, as_, bl, bs, m, opposite)


def _direction_bwd(cache, pa, direction, fuse_input, upstream):
    al, as_, bl, bs, m, opposite = cache
    up = reshape_dir(upstream, direction)
    dbl, dbs, dm = fuse_vjp(bl, bs, m, up)
    dal, das, dw, db = attention_mask_vjp(al, as_, pa, dm)
    if fuse_input == "embedded":
        dal, das = dal + dbl, das + dbs
        dcl = dcs = None
    else:
        dcl = unreshape_dir(dbl, opposite, direction)
        dcs = unreshape_dir(dbs, opposite, direction)
    return dcl, dcs, unreshape_dir(dal, opposite, direction), unreshape_dir(das, opposite, direction), dw, db


def fuse_bidirectional_fwd(cl, cs, pe: EmbedParams, pa: AttentionParams,
                           fuse_input: str = "consensus", directions=("ab", "ba")):
    if fuse_input not in FUSE_INPUTS:
        raise ValueError(f"fuse_input must be one of {FUSE_INPUTS}, got {fuse_input!r}")
    if cl.shape != cs.shape:
        raise ShapeError(f"local volume {cl.shape} and context volume {cs.shape} differ", axis="shape")
    el, el_cache = corr_embed_fwd(cl, pe)
    es, es_cache = corr_embed_fwd(cs, pe)
    fused, masks, dir_caches = {}, {}, {}
    for direction in directions:
        fused[direction], masks[direction], dir_caches[direction] = _direction_fwd(
            cl, cs, el, es, pa, direction, fuse_input
        )
    cache = (el_cache, es_cache, dir_caches, fuse_input)
    return FusionResult(fused, masks, (el, es)), cache


def fuse_bidirectional_bwd(cache, pe: EmbedParams, pa: AttentionParams, upstream: dict):
    """Return ``(d_cl, d_cs, embed grads, (d_att_weight, d_att_bias))``."""
    el_cache, es_cache, dir_caches, fuse_input = cache
    dcl = dcs = del_ = des = 0.0
    dw = np.zeros_like(pa.weight)
    db = np.zeros_like(pa.bias)
    for direction, up in upstream.items():
        gl, gs, gel, ges, gw, gb = _direction_bwd(dir_caches[direction], pa, direction, fuse_input, up)
        if gl is not None:
            dcl, dcs = dcl + gl, dcs + gs
        del_, des = del_ + gel, des + ges
        dw, db = dw + gw, db + gb
    g1, grads_l = corr_embed_bwd(el_cache, pe, np.broadcast_to(del_, el_cache[0][0].shape[1:]) * 1.0)
    g2, grads_s = corr_embed_bwd(es_cache, pe, np.broadcast_to(des, es_cache[0][0].shape[1:]) * 1.0)
    dcl, dcs = dcl + g1, dcs + g2
    egrads = [(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(grads_l, grads_s)]
    return dcl, dcs, egrads, (dw, db)


def fuse_bidirectional(cl, cs, pe, pa, fuse_input: str = "consensus"):
    """Fused ``(a->b, b->a)`` volumes, both in ``[h_a, w_a, h_b, w_b]`` layout."""
    res, _ = fuse_bidirectional_fwd(cl, cs, pe, pa, fuse_input)
    return res.fused["ab"], res.fused["ba"]
