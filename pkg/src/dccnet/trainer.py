"""Adam training on synthetic pairs and the finite-difference gradient check."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .features import FeatureMap, GroundTruthMap, SynthPairSpec, random_pair, synth_pair
from .matching import LossConfig, hard_assign

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 200
    seed: int = 0
    lam: float = 1.0
    gamma: float = 1.0
    epochs: int | None = None  # overrides steps when set
    batch_size: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def total_steps(self, n_samples: int) -> int:
        if self.epochs is None:
            return self.steps
        return self.epochs * -(-n_samples // self.batch_size)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.gamma)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    if set(params) != set(grads):
        raise ValueError(f"gradient names {sorted(grads)} != parameter names {sorted(params)}")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = cfg.beta1 * state.m[k] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        new_p[k] = p - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# -- data --------------------------------------------------------------------


@dataclass
class Sample:
    a: FeatureMap
    b: FeatureMap
    y: float
    gt: GroundTruthMap | None = None


def make_toy_dataset(n_pos: int, n_neg: int, grid=(6, 6), d: int = 8, max_shift: int = 2,
                     noise: float = 0.1, seed: int = 0) -> list[Sample]:
    """Shifted positive pairs and independent negative pairs."""
    rng = np.random.default_rng(seed)
    h, w = grid
    out = []
    for _ in range(n_pos):
        while True:
            shift = tuple(int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2))
            if shift != (0, 0):
                break
        spec = SynthPairSpec(h, w, d, "shift", shift, noise, int(rng.integers(2 ** 31)))
        a, b, gt = synth_pair(spec)
        out.append(Sample(a, b, 1.0, gt))
    for _ in range(n_neg):
        a, b = random_pair(h, w, d, int(rng.integers(2 ** 31)))
        out.append(Sample(a, b, -1.0))
    return out


def hit_rate(params: M.ModelParams, samples) -> float:
    """Fraction of ground-truth target cells whose a->b hard match is correct."""
    hits = total = 0
    for s in samples:
        if s.gt is None:
            continue
        f = M.forward(params, s.a, s.b)
        src = hard_assign(f.fused_ab, "ab").source
        for si, sj, ti, tj in s.gt.pairs:
            hits += int(src[ti, tj, 0] == si and src[ti, tj, 1] == sj)
            total += 1
    return hits / total if total else 0.0


# -- training ------------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    fuse: float
    local: float
    context: float
    total: float


@dataclass
class TrainResult:
    params: M.ModelParams
    trace: list[TraceRow]
    epoch_means: list[float]
    val_scores: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.trace])


def train_toy(samples, params: M.ModelParams, cfg: TrainConfig, val=None,
              require_both_labels: bool = True) -> TrainResult:
    """Adam on the multi-auxiliary loss, ``cfg.batch_size`` pairs per step.

    Pair order is reshuffled every epoch from ``cfg.seed``; gradients and
    trace values are batch means. With ``val`` given, the returned params
    come from the epoch with the best validation hit rate (the final partial
    epoch counts as an epoch). ``require_both_labels=False`` allows
    single-label runs such as overfitting one positive pair.
    """
    if not samples:
        raise ValueError("empty dataset")
    if require_both_labels and not {s.y for s in samples} >= {1.0, -1.0}:
        raise ValueError("dataset needs both positive and negative pairs")
    rng = np.random.default_rng(cfg.seed)
    lcfg = cfg.loss
    config = params.config
    named = {k: v.copy() for k, v in params.named().items()}
    state = AdamState.zeros_like(named)
    trace, epoch_means, val_scores = [], [], []
    best = (-np.inf, -1, params)
    steps = cfg.total_steps(len(samples))
    bs = cfg.batch_size
    step = 0
    while step < steps:
        order = rng.permutation(len(samples))
        epoch_losses = []
        for lo in range(0, len(order), bs):
            if step >= steps:
                break
            current = M.ModelParams.from_named(config, named)
            acc, grads = np.zeros(4), None
            batch = order[lo:lo + bs]
            for idx in batch:
                s = samples[idx]
                terms, g, _ = M.loss_and_grad(current, s.a, s.b, s.y, lcfg)
                acc += (terms.fuse, terms.local, terms.context, terms.total)
                grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
            n = len(batch)
            if n > 1:
                grads = {k: v / n for k, v in grads.items()}
                acc /= n
            named, state = adam_step(named, grads, state, cfg)
            trace.append(TraceRow(step, *map(float, acc)))
            epoch_losses.append(float(acc[3]))
            step += 1
        epoch_means.append(float(np.mean(epoch_losses)))
        if val is not None:
            current = M.ModelParams.from_named(config, named)
            score = hit_rate(current, val)
            val_scores.append(score)
            if score > best[0]:
                best = (score, len(epoch_means) - 1, current)
        log.debug("epoch %d mean loss %.5f", len(epoch_means) - 1, epoch_means[-1])
    final = M.ModelParams.from_named(config, named)
    if val is not None:
        return TrainResult(best[2], trace, epoch_means, val_scores, best[1])
    return TrainResult(final, trace, epoch_means, val_scores, len(epoch_means) - 1)


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "L_fuse", "L_local", "L_context", "total"])
        for r in trace:
            wr.writerow([r.step, repr(r.fuse), repr(r.local), repr(r.context), repr(r.total)])


def smooth(x, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- gradient check ---------------------------------------------------------------


@dataclass
class TensorCheck:
    name: str
    coords: int
    max_rel_err: float
    kink_retries: int


@dataclass
class GradcheckReport:
    tensors: list[TensorCheck]
    step: float
    tol: float
    seconds: float

    @property
    def max_rel_err(self) -> float:
        return max(t.max_rel_err for t in self.tensors)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "step": self.step,
            "tol": self.tol,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "tensors": [t.__dict__ for t in self.tensors],
        }


_SHRINK = np.sqrt(10.0)


def rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck_all(params: M.ModelParams, sample: Sample, loss_cfg: LossConfig | None = None,
                  n_coords: int = 20, step: float = 1e-5, tol: float = 1e-4,
                  floor: float = 1e-7, seed: int = 0, min_step: float = 1e-7) -> GradcheckReport:
    """Central differences against the analytic gradient of the total loss.

    For each tensor, ``n_coords`` coordinates are sampled (all of them if the
    tensor is smaller). If the relu/argmax pattern differs between the two
    probes, the difference straddles a kink and is redone with the step
    divided by sqrt(10), down to ``min_step``. Relative errors use ``floor`` as the smallest
    denominator.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    loss_cfg = loss_cfg or LossConfig()
    work = params.copy()
    named = work.named()
    terms, grads, base = M.loss_and_grad(work, sample.a, sample.b, sample.y, loss_cfg)

    def probe(stage):
        f = M.forward_from(work, base, stage)
        val = M.multi_aux_loss(f.fused_ab, f.fused_ba, f.c_l, f.c_s, sample.y, loss_cfg).total
        return val, M.activation_signature(f)

    results = []
    for name, arr in named.items():
        stage = M.stage_of(name)
        flat = arr.reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        worst, retries = 0.0, 0
        for ci in coords:
            old = flat[ci]
            h = step
            while True:
                flat[ci] = old + h
                lp, sp = probe(stage)
                flat[ci] = old - h
                lm, sm = probe(stage)
                flat[ci] = old
                if sp == sm or h / _SHRINK < min_step * 0.999:
                    break
                h /= _SHRINK
                retries += 1
            num = (lp - lm) / (2 * h)
            worst = max(worst, rel_err(grads[name].reshape(-1)[ci], num, floor))
        results.append(TensorCheck(name, int(len(coords)), float(worst), retries))
    return GradcheckReport(results, step, tol, time.perf_counter() - t0)


def desk_gradcheck_config() -> M.ModelConfig:
    return M.ModelConfig(grid=(6, 6), d=8, k=5, l=16, nc_kernel=3, embed_kernel=3)


def run_gradcheck(seed: int, config: M.ModelConfig | None = None, **kw) -> GradcheckReport:
    """Gradcheck a freshly initialized model on a seeded shifted pair."""
    config = config or desk_gradcheck_config()
    params = M.init_params(config, seed)
    h, w = config.grid
    rng = np.random.default_rng(seed + 7919)
    shift = tuple(int(s) for s in rng.integers(1, 3, size=2))
    a, b, gt = synth_pair(SynthPairSpec(h, w, config.d, "shift", shift, 0.1, seed))
    return gradcheck_all(params, Sample(a, b, 1.0, gt), seed=seed, **kw)
