"""The full matching network: parameters, forward pass and analytic gradients."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import correlation as corr
from . import fusion
from .matching import LossConfig, LossTerms, multi_aux_loss, multi_aux_loss_vjp
from .spatial_context import (
    context_fuse,
    context_fuse_vjp,
    init_projection,
    self_similarity,
)
from .tensor_core import DTYPE, Conv4DKernel, ShapeError


class GridMismatchError(ShapeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    grid: tuple[int, int] = (10, 10)
    d: int = 16
    k: int = 9
    l: int = 64
    nc_kernel: int = 3
    nc_channels: tuple[int, ...] = (1, 16, 16, 1)
    embed_kernel: int = 3
    embed_channels: tuple[int, ...] = (1, 16, 16, 1)
    fuse_input: str = "consensus"
    symmetric: bool = True
    normalize_context: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "nc_channels", tuple(self.nc_channels))
        object.__setattr__(self, "embed_channels", tuple(self.embed_channels))
        self.validate()

    def validate(self):
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"grid must be two positive extents, got {self.grid}")
        if self.d < 1 or self.l < 1:
            raise ValueError("d and l must be positive")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"context kernel k must be odd, got {self.k}")
        for name, ks, plan in (("consensus", self.nc_kernel, self.nc_channels),
                               ("embed", self.embed_kernel, self.embed_channels)):
            if ks < 1 or ks % 2 == 0:
                raise ValueError(f"{name} kernel size must be odd, got {ks}")
            if len(plan) < 2 or plan[0] != 1 or plan[-1] != 1:
                raise ValueError(f"{name} channel plan must start and end at 1, got {plan}")
        if self.fuse_input not in fusion.FUSE_INPUTS:
            raise ValueError(f"fuse_input must be one of {fusion.FUSE_INPUTS}")

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @classmethod
    def full_size(cls) -> "ModelConfig":
        """Full-size hyperparameters (25x25 grid from 400x400 inputs)."""
        return cls(grid=(25, 25), d=1024, k=25, l=1024, nc_kernel=5, embed_kernel=5)

    def to_dict(self) -> dict:
        return asdict(self)


def _init_kernel(c_in, c_out, k, rng):
    bound = 1.0 / np.sqrt(c_in * k ** 4)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k, k))
    # non-negative bias: symmetric draws often kill every unit of the 1-channel
    # heads, and zero bias parks idle units exactly on the relu kink
    return Conv4DKernel(w, rng.uniform(0.0, bound, size=c_out))


def _stack(plan, k, rng, init):
    if init == "delta":
        return [Conv4DKernel.delta(a, b, k) for a, b in zip(plan[:-1], plan[1:])]
    return [_init_kernel(a, b, k, rng) for a, b in zip(plan[:-1], plan[1:])]


@dataclass
class ModelParams:
    config: ModelConfig
    W: np.ndarray
    consensus: corr.ConsensusParams
    embed: fusion.EmbedParams
    attention: fusion.AttentionParams

    def named(self) -> dict[str, np.ndarray]:
        out = {"context.W": self.W}
        for tag, stack in (("consensus", self.consensus.kernels), ("embed", self.embed.kernels)):
            for n, kern in enumerate(stack):
                out[f"{tag}.{n}.weight"] = kern.weight
                out[f"{tag}.{n}.bias"] = kern.bias
        out["attention.weight"] = self.attention.weight
        out["attention.bias"] = self.attention.bias
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, t: dict[str, np.ndarray]) -> "ModelParams":
        def stack(tag, plan):
            return [Conv4DKernel(t[f"{tag}.{n}.weight"], t[f"{tag}.{n}.bias"]) for n in range(len(plan) - 1)]

        p = cls(
            config,
            np.asarray(t["context.W"], dtype=DTYPE),
            corr.ConsensusParams(stack("consensus", config.nc_channels)),
            fusion.EmbedParams(stack("embed", config.embed_channels)),
            fusion.AttentionParams(t["attention.weight"], t["attention.bias"]),
        )
        p.check()
        return p

    def copy(self) -> "ModelParams":
        return ModelParams.from_named(self.config, {k: v.copy() for k, v in self.named().items()})

    def check(self):
        cfg = self.config
        expected = {"context.W": (cfg.d + cfg.k ** 2, cfg.l)}
        for tag, ks, plan in (("consensus", cfg.nc_kernel, cfg.nc_channels),
                              ("embed", cfg.embed_kernel, cfg.embed_channels)):
            for n, (a, b) in enumerate(zip(plan[:-1], plan[1:])):
                expected[f"{tag}.{n}.weight"] = (b, a, ks, ks, ks, ks)
                expected[f"{tag}.{n}.bias"] = (b,)
        expected["attention.weight"] = (2, 2 * cfg.n_cells)
        expected["attention.bias"] = (2,)
        named = self.named()
        if set(named) != set(expected):
            raise ShapeError(f"parameter names {sorted(named)} do not match config", axis="names")
        for name, shape in expected.items():
            if named[name].shape != shape:
                raise ShapeError(f"{name} has shape {named[name].shape}, config implies {shape}", axis=name)
            if not np.all(np.isfinite(named[name])):
                raise FloatingPointError(f"{name} has non-finite entries")


def init_params(config: ModelConfig, seed: int = 0, consensus_init: str = "random",
                embed_init: str = "random") -> ModelParams:
    """Seeded uniform fan-in initialization of every learnable tensor.

    ``consensus_init="delta"`` makes each consensus layer a center-tap
    identity on channel 0, so the consensus stack reduces to ``relu``.
    """
    rng = np.random.default_rng(seed)
    W = init_projection(config.d, config.k, config.l, rng)
    nc = _stack(config.nc_channels, config.nc_kernel, rng, consensus_init)
    em = _stack(config.embed_channels, config.embed_kernel, rng, embed_init)
    fan = 2 * config.n_cells
    bound = 1.0 / np.sqrt(fan)
    att = fusion.AttentionParams(rng.uniform(-bound, bound, (2, fan)), rng.uniform(-bound, bound, 2))
    return ModelParams(config, W, corr.ConsensusParams(nc), fusion.EmbedParams(em), att)


@dataclass
class Forward:
    c_l: np.ndarray
    c_s: np.ndarray
    fused_ab: np.ndarray
    fused_ba: np.ndarray
    masks: dict
    g_a: np.ndarray
    g_b: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def _feature(f, cfg: ModelConfig, side: str) -> np.ndarray:
    z = np.asarray(getattr(f, "data", f), dtype=DTYPE)
    if z.ndim != 3 or z.shape[0] != cfg.d or z.shape[1:] != cfg.grid:
        raise GridMismatchError(
            f"grid mismatch: feature map {side} has shape {z.shape}, model expects "
            f"({cfg.d}, {cfg.grid[0]}, {cfg.grid[1]})",
            axis=side,
        )
    return z


def forward(params: ModelParams, za, zb) -> Forward:
    cfg = params.config
    za, zb = _feature(za, cfg, "a"), _feature(zb, cfg, "b")
    sa, sb = self_similarity(za, cfg.k), self_similarity(zb, cfg.k)
    ga = context_fuse(za, sa, params.W, cfg.normalize_context)
    gb = context_fuse(zb, sb, params.W, cfg.normalize_context)
    c_l, l_cache = corr.corr_pipeline_fwd(za, zb, params.consensus, cfg.symmetric)
    c_s, s_cache = corr.corr_pipeline_fwd(ga, gb, params.consensus, cfg.symmetric)
    res, f_cache = fusion.fuse_bidirectional_fwd(c_l, c_s, params.embed, params.attention, cfg.fuse_input)
    cache = dict(za=za, zb=zb, sa=sa, sb=sb, ga=ga, gb=gb, l=l_cache, s=s_cache, f=f_cache)
    return Forward(c_l, c_s, res.fused["ab"], res.fused["ba"], res.masks, ga, gb, cache)


def backward(params: ModelParams, fwd: Forward, d_ab, d_ba, d_l, d_s) -> dict[str, np.ndarray]:
    """Parameter gradients given cotangents on the four output volumes."""
    cfg = params.config
    c = fwd.cache
    gcl, gcs, egrads, (daw, dab) = fusion.fuse_bidirectional_bwd(
        c["f"], params.embed, params.attention, {"ab": d_ab, "ba": d_ba}
    )
    graw_l, nc_l = corr.corr_pipeline_bwd(c["l"], params.consensus, d_l + gcl)
    graw_s, nc_s = corr.corr_pipeline_bwd(c["s"], params.consensus, d_s + gcs)
    dga, dgb = corr.raw_correlation_vjp(c["ga"], c["gb"], graw_s)
    _, _, dWa = context_fuse_vjp(c["za"], c["sa"], params.W, dga, cfg.normalize_context)
    _, _, dWb = context_fuse_vjp(c["zb"], c["sb"], params.W, dgb, cfg.normalize_context)
    grads = {"context.W": dWa + dWb}
    for n, ((w1, b1), (w2, b2)) in enumerate(zip(nc_l, nc_s)):
        grads[f"consensus.{n}.weight"] = w1 + w2
        grads[f"consensus.{n}.bias"] = b1 + b2
    for n, (w, b) in enumerate(egrads):
        grads[f"embed.{n}.weight"] = w
        grads[f"embed.{n}.bias"] = b
    grads["attention.weight"] = daw
    grads["attention.bias"] = dab
    return grads


def loss(params: ModelParams, za, zb, y: float, loss_cfg: LossConfig | None = None) -> LossTerms:
    f = forward(params, za, zb)
    return multi_aux_loss(f.fused_ab, f.fused_ba, f.c_l, f.c_s, y, loss_cfg)


def loss_and_grad(params: ModelParams, za, zb, y: float, loss_cfg: LossConfig | None = None):
    f = forward(params, za, zb)
    terms = multi_aux_loss(f.fused_ab, f.fused_ba, f.c_l, f.c_s, y, loss_cfg)
    cot = multi_aux_loss_vjp(f.fused_ab, f.fused_ba, f.c_l, f.c_s, y, loss_cfg)
    return terms, backward(params, f, *cot), f


# -- DCCP serialization ----------------------------------------------------

DCCP_MAGIC = b"DCCP"
DCCP_VERSION = 1
_CONFIG_RECORD = "config"


class DccpError(ValueError):
    pass


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    head = [cfg.grid[0], cfg.grid[1], cfg.d, cfg.k, cfg.l, cfg.nc_kernel, cfg.embed_kernel,
            float(cfg.symmetric), float(cfg.fuse_input == "embedded"), float(cfg.normalize_context),
            len(cfg.nc_channels), len(cfg.embed_channels)]
    return np.asarray(head + list(cfg.nc_channels) + list(cfg.embed_channels), dtype=DTYPE)


def _config_from_vector(v: np.ndarray) -> ModelConfig:
    v = [int(round(x)) for x in v]
    n_nc, n_em = v[10], v[11]
    return ModelConfig(
        grid=(v[0], v[1]), d=v[2], k=v[3], l=v[4], nc_kernel=v[5], embed_kernel=v[6],
        symmetric=bool(v[7]), fuse_input="embedded" if v[8] else "consensus",
        normalize_context=bool(v[9]),
        nc_channels=tuple(v[12:12 + n_nc]), embed_channels=tuple(v[12 + n_nc:12 + n_nc + n_em]),
    )


def save_params(params: ModelParams, path):
    """Write ``DCCP`` records: u16 name length, name, u8 rank, u32 dims, f64 data."""
    records = {_CONFIG_RECORD: _config_vector(params.config), **params.named()}
    with open(path, "wb") as fh:
        fh.write(DCCP_MAGIC + struct.pack("<H", DCCP_VERSION))
        for name, arr in records.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_records(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != DCCP_MAGIC:
        raise DccpError(f"{path}: bad magic")
    if len(raw) < 6:
        raise DccpError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != DCCP_VERSION:
        raise DccpError(f"{path}: unsupported version {version}")
    off, out = 6, {}
    try:
        while off < len(raw):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", raw, off)
            dims = struct.unpack_from(f"<{rank}I", raw, off + 1)
            off += 1 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 8 * count > len(raw):
                raise DccpError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).astype(DTYPE)
            off += 8 * count
    except struct.error as exc:
        raise DccpError(f"{path}: truncated record header") from exc
    return out


def load_params(path) -> ModelParams:
    records = read_records(path)
    if _CONFIG_RECORD not in records:
        raise DccpError(f"{path}: missing config record")
    cfg = _config_from_vector(records.pop(_CONFIG_RECORD))
    return ModelParams.from_named(cfg, records)


def with_config(params: ModelParams, **changes) -> ModelParams:
    """Same tensors under a config with switches changed (e.g. ``fuse_input``)."""
    return ModelParams.from_named(replace(params.config, **changes), params.named())


# -- partial recomputation for finite differences --------------------------

STAGES = ("full", "context", "fusion")


def stage_of(name: str) -> str:
    """Earliest pipeline stage a parameter influences."""
    if name.startswith(("embed.", "attention.")):
        return "fusion"
    if name.startswith("context."):
        return "context"
    return "full"


def forward_from(params: ModelParams, base: Forward, stage: str) -> Forward:
    """Recompute ``forward`` reusing ``base`` for stages upstream of ``stage``."""
    if stage == "full":
        return forward(params, base.cache["za"], base.cache["zb"])
    cfg = params.config
    c = dict(base.cache)
    c_s, ga, gb = base.c_s, base.g_a, base.g_b
    if stage == "context":
        ga = context_fuse(c["za"], c["sa"], params.W, cfg.normalize_context)
        gb = context_fuse(c["zb"], c["sb"], params.W, cfg.normalize_context)
        c_s, c["s"] = corr.corr_pipeline_fwd(ga, gb, params.consensus, cfg.symmetric)
        c["ga"], c["gb"] = ga, gb
    elif stage != "fusion":
        raise ValueError(f"unknown stage {stage!r}")
    res, c["f"] = fusion.fuse_bidirectional_fwd(base.c_l, c_s, params.embed, params.attention, cfg.fuse_input)
    return Forward(base.c_l, c_s, res.fused["ab"], res.fused["ba"], res.masks, ga, gb, c)


def activation_signature(fwd: Forward) -> bytes:
    """Digest of every piecewise choice in the pass: relu masks and argmax winners.

    Two evaluations with equal signatures lie on the same smooth piece.
    """
    h = hashlib.sha1()

    def add(x):
        h.update(np.ascontiguousarray(x).tobytes())

    def add_pipeline(pc):
        raw, c1, c2, c3 = pc
        for mnn in (c1, c3):
            r = mnn[1]
            flat = r.reshape(r.shape[0] * r.shape[1], -1)
            add(mnn[0] > 0)
            add(flat.argmax(axis=0))
            add(flat.argmax(axis=1))
        for stack in c2:
            if stack is not None:
                for pre in stack[1]:
                    add(pre > 0)

    c = fwd.cache
    add(c["ga"] > 0)
    add(c["gb"] > 0)
    add_pipeline(c["l"])
    add_pipeline(c["s"])
    for stack in c["f"][:2]:
        for pre in stack[1]:
            add(pre > 0)
    for vol in (fwd.fused_ab, fwd.fused_ba, fwd.c_l, fwd.c_s):
        flat = vol.reshape(vol.shape[0] * vol.shape[1], -1)
        add(flat.argmax(axis=0))
        add(flat.argmax(axis=1))
    return h.digest()
