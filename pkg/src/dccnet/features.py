"""Feature-map container, FMAP binary I/O and synthetic matched pairs."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import DTYPE, l2_normalize_channels

MAGIC = b"FMAP"
VERSION = 1
VOLUME_VERSION = 2
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHBB")
_MAX_ELEMS = 1 << 31


class FmapError(ValueError):
    pass


class BadMagicError(FmapError):
    pass


class TruncatedError(FmapError):
    pass


class ExtentOverflowError(FmapError):
    pass


@dataclass
class FeatureMap:
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be [d, h, w] with positive extents, got {self.data.shape}")

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_raw(cls, data) -> "FeatureMap":
        return cls(l2_normalize_channels(np.asarray(data, dtype=DTYPE)), normalized=True)


def _dtype_code(precision: str) -> int:
    if precision == "f64":
        return 1
    if precision == "f32":
        return 0
    raise ValueError(f"unknown precision {precision!r}")


def _write(path, version: int, code: int, dims, payload: np.ndarray, rank_field: bool):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, code, 0))
        if rank_field:
            fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(np.ascontiguousarray(payload, dtype=_DTYPES[code]).tobytes())


def _read(path, expect_version: int):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, version, code, _pad = _HEADER.unpack_from(raw)
    if version != expect_version:
        raise FmapError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FmapError(f"{path}: unknown dtype code {code}")
    off = _HEADER.size
    if version == VOLUME_VERSION:
        if len(raw) < off + 4:
            raise TruncatedError(f"{path}: truncated header")
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        if not 1 <= rank <= 6:
            raise FmapError(f"{path}: rank {rank} out of range")
    else:
        rank = 3
    if len(raw) < off + 4 * rank:
        raise TruncatedError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    n = 1
    for e in dims:
        if e < 1:
            raise FmapError(f"{path}: zero extent in {dims}")
        n *= e
        if n > _MAX_ELEMS:
            raise ExtentOverflowError(f"{path}: extents {dims} overflow element limit")
    dt = _DTYPES[code]
    need = n * dt.itemsize
    if len(raw) - off < need:
        raise TruncatedError(f"{path}: truncated payload ({len(raw) - off} of {need} bytes)")
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(dims)
    return arr, code


def save_fmap(fmap: FeatureMap, path, precision: str = "f64"):
    _write(path, VERSION, _dtype_code(precision), fmap.data.shape, fmap.data, rank_field=False)


def load_fmap(path, normalized: bool | None = None) -> FeatureMap:
    """Read an FMAP file.

    The payload is returned in float64 regardless of the stored precision;
    f32 files therefore round-trip exactly through f32 storage only.
    ``normalized`` defaults to checking the column norms.
    """
    arr, _ = _read(path, VERSION)
    data = arr.astype(DTYPE)
    if normalized is None:
        norms = np.sqrt((data * data).sum(axis=0))
        tol = 1e-6 if arr.dtype == np.float32 else 1e-9
        normalized = bool(np.all((norms == 0) | (np.abs(norms - 1) <= tol)))
    return FeatureMap(data, normalized=normalized)


def save_volume(volume: np.ndarray, path, precision: str = "f64"):
    """Write an arbitrary-rank array with the extended FMAP header."""
    volume = np.asarray(volume)
    _write(path, VOLUME_VERSION, _dtype_code(precision), volume.shape, volume, rank_field=True)


def load_volume(path) -> np.ndarray:
    arr, _ = _read(path, VOLUME_VERSION)
    return arr.astype(DTYPE)


@dataclass
class GroundTruthMap:
    """Source-cell to target-cell bijection on the overlap of a synthetic pair."""

    pairs: list[tuple[int, int, int, int]] = field(default_factory=list)

    def as_dict(self) -> dict[tuple[int, int], tuple[int, int]]:
        return {(si, sj): (ti, tj) for si, sj, ti, tj in self.pairs}

    def inverse(self) -> dict[tuple[int, int], tuple[int, int]]:
        return {(ti, tj): (si, sj) for si, sj, ti, tj in self.pairs}

    def is_injective(self) -> bool:
        return len({(ti, tj) for _, _, ti, tj in self.pairs}) == len(self.pairs)

    def to_json(self) -> str:
        return json.dumps([list(p) for p in self.pairs])

    @classmethod
    def from_json(cls, text: str) -> "GroundTruthMap":
        return cls([tuple(int(v) for v in p) for p in json.loads(text)])

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GroundTruthMap":
        return cls.from_json(Path(path).read_text())


@dataclass
class SynthPairSpec:
    h: int
    w: int
    d: int = 16
    transform: str = "identity"  # identity | shift | permutation
    shift: tuple[int, int] = (0, 0)
    noise: float = 0.0
    seed: int = 0

    def validate(self):
        if self.h < 1 or self.w < 1 or self.d < 1:
            raise ValueError(f"grid and channel extents must be positive: {self}")
        if self.transform not in ("identity", "shift", "permutation"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.transform == "shift":
            dr, dc = self.shift
            if abs(dr) >= self.h or abs(dc) >= self.w:
                raise ValueError(f"shift {self.shift} must be smaller than grid {self.h}x{self.w}")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")


def synth_pair(spec: SynthPairSpec):
    """Random feature map ``a`` and a transformed copy ``b``.

    For a shift ``(dr, dc)`` the content at ``a[:, i, j]`` moves to
    ``b[:, i + dr, j + dc]``; cells of ``b`` with no preimage are filled with
    fresh standard-normal noise. Returns ``(a, b, ground_truth)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, d = spec.h, spec.w, spec.d
    za = rng.standard_normal((d, h, w))
    pairs = []
    if spec.transform == "identity":
        zb = za.copy()
        pairs = [(i, j, i, j) for i in range(h) for j in range(w)]
    elif spec.transform == "shift":
        dr, dc = spec.shift
        zb = rng.standard_normal((d, h, w))
        for i in range(h):
            for j in range(w):
                ti, tj = i + dr, j + dc
                if 0 <= ti < h and 0 <= tj < w:
                    zb[:, ti, tj] = za[:, i, j]
                    pairs.append((i, j, ti, tj))
    else:
        perm = rng.permutation(h * w)
        flat_a = za.reshape(d, -1)
        flat_b = np.empty_like(flat_a)
        flat_b[:, perm] = flat_a
        zb = flat_b.reshape(d, h, w)
        pairs = [(s // w, s % w, int(t) // w, int(t) % w) for s, t in enumerate(perm)]
    if spec.noise > 0:
        zb = zb + spec.noise * rng.standard_normal(zb.shape)
    a = FeatureMap.from_raw(za)
    b = FeatureMap.from_raw(zb)
    return a, b, GroundTruthMap(sorted(pairs))


def random_pair(h: int, w: int, d: int, seed: int):
    """Two independent feature maps (a synthetic non-matching pair)."""
    rng = np.random.default_rng(seed)
    return (
        FeatureMap.from_raw(rng.standard_normal((d, h, w))),
        FeatureMap.from_raw(rng.standard_normal((d, h, w))),
    )
