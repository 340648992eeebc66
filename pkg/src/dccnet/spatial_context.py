"""Dense self-similarity descriptors and context-aware features."""
from __future__ import annotations

import numpy as np

from .tensor_core import DTYPE, ShapeError, l2_normalize_channels, l2_normalize_vjp, relu


def _offsets(k: int):
    r = k // 2
    return [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]


def _check_k(k: int):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"context kernel size must be odd and >= 1, got {k}")


def self_similarity(z: np.ndarray, k: int) -> np.ndarray:
    """Dot products of each column with its ``k x k`` zero-padded neighborhood.

    Returns ``[k*k, h, w]``; plane ``t`` holds the neighbor at row-major
    offset ``t`` (top-left first, center at ``(k*k - 1) // 2``).
    """
    _check_k(k)
    z = np.asarray(z, dtype=DTYPE)
    d, h, w = z.shape
    r = k // 2
    zp = np.pad(z, ((0, 0), (r, r), (r, r)))
    out = np.empty((k * k, h, w), dtype=DTYPE)
    for t, (di, dj) in enumerate(_offsets(k)):
        out[t] = (z * zp[:, r + di:r + di + h, r + dj:r + dj + w]).sum(axis=0)
    return out


def self_similarity_vjp(z: np.ndarray, k: int, upstream: np.ndarray) -> np.ndarray:
    _check_k(k)
    z = np.asarray(z, dtype=DTYPE)
    d, h, w = z.shape
    r = k // 2
    zp = np.pad(z, ((0, 0), (r, r), (r, r)))
    dz = np.zeros_like(z)
    dzp = np.zeros_like(zp)
    for t, (di, dj) in enumerate(_offsets(k)):
        g = upstream[t][None]
        win = (slice(None), slice(r + di, r + di + h), slice(r + dj, r + dj + w))
        dz += g * zp[win]
        dzp[win] += g * z
    return dz + dzp[:, r:r + h, r:r + w]


def init_projection(d: int, k: int, l: int, rng: np.random.Generator) -> np.ndarray:
    fan_in = d + k * k
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, l))


def _stack(z: np.ndarray, s: np.ndarray, W: np.ndarray) -> np.ndarray:
    if z.shape[1:] != s.shape[1:]:
        raise ShapeError(f"descriptor grid {s.shape[1:]} != feature grid {z.shape[1:]}", axis="grid")
    if W.shape[0] != s.shape[0] + z.shape[0]:
        raise ShapeError(
            f"projection has {W.shape[0]} rows, expected d + k^2 = {z.shape[0] + s.shape[0]}",
            axis="W",
        )
    return np.concatenate([s, z], axis=0).reshape(W.shape[0], -1)


def context_fuse(z, s, W, normalize: bool = True) -> np.ndarray:
    """``g = relu(W^T [s; z])`` per location, optionally unit-normalized."""
    z = np.asarray(z, dtype=DTYPE)
    x = _stack(z, s, W)
    g = relu(W.T @ x).reshape(W.shape[1], *z.shape[1:])
    return l2_normalize_channels(g) if normalize else g


def context_fuse_vjp(z, s, W, upstream, normalize: bool = True):
    """Return ``(d_z, d_s, d_W)``."""
    z = np.asarray(z, dtype=DTYPE)
    x = _stack(z, s, W)
    pre = W.T @ x
    g = np.maximum(pre, 0.0)
    up = upstream.reshape(W.shape[1], -1)
    if normalize:
        up = l2_normalize_vjp(g, up)
    dpre = np.where(pre > 0, up, 0.0)
    dW = x @ dpre.T
    dx = (W @ dpre).reshape(W.shape[0], *z.shape[1:])
    ks = s.shape[0]
    return dx[ks:], dx[:ks], dW


def encode(z, W, k: int, normalize: bool = True):
    """Full context encoder: returns ``(G, S)`` for feature map ``z``."""
    s = self_similarity(z, k)
    return context_fuse(z, s, W, normalize), s
