"""Assignments, weakly-supervised losses, keypoint transfer and PCK."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correlation import exchange
from .tensor_core import DTYPE, softmax_axis


def _oriented(c: np.ndarray, direction: str) -> np.ndarray:
    """View with the searched-over side first: ``[src..., tgt...]``."""
    if direction == "ab":
        return c
    if direction == "ba":
        return exchange(c)
    raise ValueError(f"direction must be 'ab' or 'ba', got {direction!r}")


@dataclass
class Assignment:
    """For every target cell, the matched source cell and its score.

    In direction ``ab`` targets are cells of image b and sources cells of a;
    ``ba`` swaps the roles.
    """

    direction: str
    source: np.ndarray  # [h_t, w_t, 2] int
    score: np.ndarray  # [h_t, w_t]

    def as_pairs(self) -> list[tuple[int, int, int, int]]:
        """``(src_i, src_j, tgt_i, tgt_j)`` rows in target row-major order."""
        h, w = self.score.shape
        return [(int(self.source[m, n, 0]), int(self.source[m, n, 1]), m, n) for m in range(h) for n in range(w)]


def hard_assign(c: np.ndarray, direction: str = "ab") -> Assignment:
    """Argmax over source cells per target cell; ties go to the smallest
    row-major source index (``numpy.argmax`` semantics)."""
    v = _oriented(np.asarray(c, dtype=DTYPE), direction)
    hs, ws, ht, wt = v.shape
    flat = v.reshape(hs * ws, ht * wt)
    idx = flat.argmax(axis=0)
    score = flat[idx, np.arange(ht * wt)].reshape(ht, wt)
    src = np.stack([idx // ws, idx % ws], axis=-1).reshape(ht, wt, 2)
    return Assignment(direction, src, score)


@dataclass
class MatchScore:
    a: float
    b: float


def direction_score(c: np.ndarray, direction: str) -> float:
    """Mean softmax probability at the hard-assigned source, over targets.

    ``ab`` softmaxes each target slice over source cells (gives s_b);
    ``ba`` softmaxes over target cells for each source cell (gives s_a).
    """
    return float(_score_probs(c, direction)[0].mean())


def _score_probs(c, direction):
    v = _oriented(np.asarray(c, dtype=DTYPE), direction)
    hs, ws, ht, wt = v.shape
    flat = v.reshape(hs * ws, ht * wt)
    p = softmax_axis(flat, axis=0)
    idx = flat.argmax(axis=0)
    return p[idx, np.arange(ht * wt)], (p, idx, v.shape)


def direction_score_vjp(c: np.ndarray, direction: str, upstream: float) -> np.ndarray:
    pstar, (p, idx, vshape) = _score_probs(c, direction)
    nt = p.shape[1]
    g = -p * pstar[None]
    g[idx, np.arange(nt)] += pstar
    g *= upstream / nt
    g = g.reshape(vshape)
    return exchange(g) if direction == "ba" else g


def soft_scores(c: np.ndarray) -> MatchScore:
    return MatchScore(a=direction_score(c, "ba"), b=direction_score(c, "ab"))


@dataclass
class LossConfig:
    lam: float = 1.0
    gamma: float = 1.0
    swap_directions: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


def _pairing(swap: bool):
    # (volume role, direction) feeding s_b and s_a
    return (("ba", "ab"), ("ab", "ba")) if swap else (("ab", "ab"), ("ba", "ba"))


def weak_loss(c_ab: np.ndarray, c_ba: np.ndarray, y: float, swap: bool = False) -> float:
    """``-y * (s_a + s_b)`` with s_b scored on ``c_ab`` and s_a on ``c_ba``."""
    vols = {"ab": c_ab, "ba": c_ba}
    total = sum(direction_score(vols[role], d) for role, d in _pairing(swap))
    return -float(y) * total


def weak_loss_vjp(c_ab, c_ba, y: float, swap: bool = False, upstream: float = 1.0):
    vols = {"ab": c_ab, "ba": c_ba}
    grads = {"ab": np.zeros_like(c_ab, dtype=DTYPE), "ba": np.zeros_like(c_ba, dtype=DTYPE)}
    for role, d in _pairing(swap):
        grads[role] += direction_score_vjp(vols[role], d, -float(y) * upstream)
    return grads["ab"], grads["ba"]


@dataclass
class LossTerms:
    fuse: float
    local: float
    context: float
    total: float


def multi_aux_loss(c_ab, c_ba, c_l, c_s, y: float, cfg: LossConfig | None = None) -> LossTerms:
    """Fused loss plus the same weak loss on each single-branch volume."""
    cfg = cfg or LossConfig()
    lf = weak_loss(c_ab, c_ba, y, cfg.swap_directions)
    ll = weak_loss(c_l, c_l, y, cfg.swap_directions)
    lc = weak_loss(c_s, c_s, y, cfg.swap_directions)
    return LossTerms(lf, ll, lc, lf + cfg.lam * ll + cfg.gamma * lc)


def multi_aux_loss_vjp(c_ab, c_ba, c_l, c_s, y: float, cfg: LossConfig | None = None):
    """Return cotangents ``(d_ab, d_ba, d_l, d_s)`` of the total loss."""
    cfg = cfg or LossConfig()
    g_ab, g_ba = weak_loss_vjp(c_ab, c_ba, y, cfg.swap_directions)
    g_l = sum(weak_loss_vjp(c_l, c_l, y, cfg.swap_directions, cfg.lam))
    g_s = sum(weak_loss_vjp(c_s, c_s, y, cfg.swap_directions, cfg.gamma))
    return g_ab, g_ba, g_l, g_s


# -- keypoints -----------------------------------------------------------


class KeypointError(ValueError):
    pass


@dataclass
class KeypointSet:
    """Pixel keypoints ``(x, y)`` in an image of size ``(H, W)``."""

    size: tuple[int, int]
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.size = (int(self.size[0]), int(self.size[1]))
        self.points = np.asarray(self.points, dtype=DTYPE).reshape(-1, 2)

    def check_bounds(self):
        H, W = self.size
        x, y = self.points[:, 0], self.points[:, 1]
        bad = ~((x >= 0) & (x < W) & (y >= 0) & (y < H))
        if bad.any():
            offending = [tuple(map(float, p)) for p in self.points[bad]]
            raise KeypointError(f"keypoints outside {W}x{H} image: {offending}")

    def to_dict(self) -> dict:
        return {"size": list(self.size), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "KeypointSet":
        return cls(tuple(obj["size"]), obj["points"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KeypointSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def pixel_to_cell(points: np.ndarray, size, grid) -> np.ndarray:
    """Feature cell ``(row, col)`` of each pixel ``(x, y)``."""
    H, W = size
    h, w = grid
    col = np.floor(points[:, 0] / (W / w)).astype(int)
    row = np.floor(points[:, 1] / (H / h)).astype(int)
    return np.stack([np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)], axis=1)


def cell_center(cells: np.ndarray, size, grid) -> np.ndarray:
    """Pixel ``(x, y)`` of the centers of float or integer cells ``(row, col)``."""
    H, W = size
    h, w = grid
    cells = np.asarray(cells, dtype=DTYPE)
    return np.stack([(cells[:, 1] + 0.5) * (W / w), (cells[:, 0] + 0.5) * (H / h)], axis=1)


def transfer_keypoints(c: np.ndarray, kps: KeypointSet, direction: str = "ab",
                       mode: str = "hard", out_size=None) -> KeypointSet:
    """Move keypoints from the target image of ``direction`` to its source image.

    With ``ab`` the points live in image b and land in image a.
    ``out_size`` is the source image size (defaults to ``kps.size``).
    """
    kps.check_bounds()
    v = _oriented(np.asarray(c, dtype=DTYPE), direction)
    hs, ws, ht, wt = v.shape
    out_size = tuple(out_size or kps.size)
    cells = pixel_to_cell(kps.points, kps.size, (ht, wt))
    if mode == "hard":
        a = hard_assign(c, direction)
        src = a.source[cells[:, 0], cells[:, 1]]
    elif mode == "soft":
        slices = v[:, :, cells[:, 0], cells[:, 1]].reshape(hs * ws, -1)
        p = softmax_axis(slices, axis=0)
        rows, cols = np.divmod(np.arange(hs * ws), ws)
        src = np.stack([rows @ p, cols @ p], axis=1)
    else:
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")
    return KeypointSet(out_size, cell_center(src, out_size, (hs, ws)))


@dataclass
class PCKReport:
    alphas: list[float]
    correct: list[int]
    total: int
    pck: list[float]
    mode: str
    reference: float

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "mode": self.mode,
            "reference_size": self.reference,
            "total": self.total,
            "entries": [
                {"alpha": a, "correct": c, "pck": p} for a, c, p in zip(self.alphas, self.correct, self.pck)
            ],
        }


def pck(pred: KeypointSet, gt: KeypointSet, alphas=(0.05, 0.10, 0.15), mode: str = "image") -> PCKReport:
    """Fraction of points with error ``<= alpha * max(H_ref, W_ref)``.

    ``image`` uses the ground-truth image size, ``bbox`` the tight box of the
    ground-truth keypoints.
    """
    if len(pred.points) != len(gt.points):
        raise KeypointError(f"prediction has {len(pred.points)} points, ground truth {len(gt.points)}")
    if mode == "image":
        ref = float(max(gt.size))
    elif mode == "bbox":
        ext = gt.points.max(axis=0) - gt.points.min(axis=0) if len(gt.points) else np.zeros(2)
        ref = float(max(ext))
    else:
        raise ValueError(f"mode must be 'image' or 'bbox', got {mode!r}")
    err = np.linalg.norm(pred.points - gt.points, axis=1)
    n = len(err)
    correct = [int((err <= a * ref).sum()) for a in alphas]
    ratios = [c / n if n else 0.0 for c in correct]
    return PCKReport([float(a) for a in alphas], correct, n, ratios, mode, ref)
