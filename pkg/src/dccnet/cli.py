"""Batch command-line front end: match, train-toy, gradcheck, pck.

Every command writes a run manifest (JSON) next to its main output, or to
``--manifest``. Exit codes: 0 ok, 2 input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import trainer as T
from .features import FmapError, load_fmap, save_volume
from .matching import KeypointError, KeypointSet, direction_score, hard_assign, pck
from .tensor_core import ShapeError

SCHEMA = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "DCCNET_SEED"

log = logging.getLogger("dccnet")


class InputError(Exception):
    """Bad flags or unreadable inputs (exit code 2)."""


class NumericFailure(Exception):
    """A computation ran but its result failed a numeric check (exit code 3)."""


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    seed: int | None = None
    wall_time_s: float = 0.0
    outputs: list = field(default_factory=list)
    status: str = "running"
    error: dict | None = None
    result: dict | None = None

    def add_input(self, path):
        self.inputs[str(path)] = _digest(path)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, **asdict(self)}


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None


# -- match ---------------------------------------------------------------------


def _stats(x) -> dict:
    return {"min": float(np.min(x)), "mean": float(np.mean(x)), "max": float(np.max(x))}


def _assignment_json(vol, direction) -> dict:
    a = hard_assign(vol, direction)
    return {"source": a.source.tolist(), "score": a.score.tolist()}


def match_pair(params_path: str, src: str, tgt: str, fuse_input: str | None, directions,
               dump_dir: str | None = None, tag: str = "") -> dict:
    """Run the network on one pair; returns the JSON-ready pair report."""
    params = M.load_params(params_path)
    if fuse_input and fuse_input != params.config.fuse_input:
        params = M.with_config(params, fuse_input=fuse_input)
    a, b = load_fmap(src), load_fmap(tgt)
    f = M.forward(params, a, b)
    vols = {"ab": f.fused_ab, "ba": f.fused_ba}
    report = {
        "src": src,
        "tgt": tgt,
        "assignments": {d: _assignment_json(vols[d], d) for d in directions},
        # s_b scores the a->b volume over sources, s_a the b->a volume
        "soft_scores": {"a": direction_score(f.fused_ba, "ba"), "b": direction_score(f.fused_ab, "ab")},
        "mask_stats": {d: _stats(f.masks[d]) for d in directions},
    }
    if dump_dir:
        dumped = {}
        for name, vol in (("c_l", f.c_l), ("c_s", f.c_s), ("fused_ab", f.fused_ab), ("fused_ba", f.fused_ba)):
            path = str(Path(dump_dir) / f"{tag}{name}.fmap")
            save_volume(vol, path)
            dumped[name] = path
        report["volumes"] = dumped
    return report


def _match_job(job):
    return match_pair(*job)


def _run_jobs(fn, jobs: list, n_workers: int) -> list:
    """Ordered results; the worker count never changes what is computed."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def cmd_match(args, man: RunManifest) -> int:
    directions = ["ab", "ba"] if args.direction == "both" else [args.direction]
    if args.pairs:
        man.add_input(args.pairs)
        try:
            pairs = json.loads(Path(args.pairs).read_text())
            pairs = [(p["src"], p["tgt"]) for p in pairs]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{args.pairs}: expected a list of {{src, tgt}} objects ({exc})") from None
    elif args.src and args.tgt:
        pairs = [(args.src, args.tgt)]
    else:
        raise InputError("match needs --src and --tgt, or --pairs")
    if args.dump_corr:
        Path(args.dump_corr).mkdir(parents=True, exist_ok=True)
    man.add_input(args.params)
    for s, t in pairs:
        man.add_input(s)
        man.add_input(t)
    jobs = [(args.params, s, t, args.fuse_input, directions, args.dump_corr, f"pair{i:04d}_" if args.pairs else "")
            for i, (s, t) in enumerate(pairs)]
    man.config = {"fuse_input": args.fuse_input, "direction": args.direction, "jobs": args.jobs}
    results = _run_jobs(_match_job, jobs, args.jobs)
    report = {"schema": SCHEMA, "params": args.params, "directions": directions}
    if args.pairs:
        report["pairs"] = results
    else:
        report.update(results[0])
    dump_json(report, args.out)
    man.outputs.append(args.out)
    for r in results:
        man.outputs.extend(r.get("volumes", {}).values())
    return EXIT_OK


# -- train-toy -----------------------------------------------------------------


def default_train_config() -> dict:
    """Desk-scale toy run: 20 shifted + 20 independent pairs, 200 Adam steps."""
    cfg = T.desk_gradcheck_config()
    return {
        "model": cfg.to_dict(),
        "train": asdict(T.TrainConfig()),
        "data": {"n_pos": 20, "n_neg": 20, "max_shift": 2, "noise": 0.1},
        "val": {"n_pos": 10},
    }


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_train_config(path: str | None) -> dict:
    cfg = default_train_config()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: {exc}") from None
        unknown = set(user) - set(cfg)
        if unknown:
            raise InputError(f"{path}: unknown sections {sorted(unknown)}")
        cfg = _merge(cfg, user)
    return cfg


def train_from_config(cfg: dict, seed: int) -> T.TrainResult:
    try:
        mcfg = M.ModelConfig(**cfg["model"])
        tcfg = T.TrainConfig(**{**cfg["train"], "seed": seed})
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from None
    data = cfg["data"]
    samples = T.make_toy_dataset(data["n_pos"], data["n_neg"], mcfg.grid, mcfg.d,
                                 data["max_shift"], data["noise"], seed)
    val = None
    if cfg.get("val") and cfg["val"].get("n_pos", 0) > 0:
        val = T.make_toy_dataset(cfg["val"]["n_pos"], 0, mcfg.grid, mcfg.d,
                                 data["max_shift"], data["noise"], seed + 1000)
    params = M.init_params(mcfg, seed)
    return T.train_toy(samples, params, tcfg, val=val)


def cmd_train_toy(args, man: RunManifest) -> int:
    if args.config:
        man.add_input(args.config)
    cfg = load_train_config(args.config)
    cfg["train"]["seed"] = man.seed
    man.config = cfg
    res = train_from_config(cfg, man.seed)
    totals = res.totals()
    if not np.all(np.isfinite(totals)):
        raise NumericFailure("non-finite loss during training")
    M.save_params(res.params, args.out)
    man.outputs.append(args.out)
    if args.trace:
        T.write_trace(res.trace, args.trace)
        man.outputs.append(args.trace)
    man.result = {
        "steps": len(res.trace),
        "initial_loss": float(totals[0]),
        "final_loss": float(totals[-1]),
        # window-10 trailing means; single steps flip with the pair label
        "initial_loss_smoothed": float(np.mean(totals[:10])),
        "final_loss_smoothed": float(np.mean(totals[-10:])),
        "epoch_means": res.epoch_means,
        "val_hit_rates": res.val_scores,
        "best_epoch": res.best_epoch,
    }
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------


def _gradcheck_job(seed: int):
    rep = T.run_gradcheck(seed)
    return rep.to_dict(), rep.seconds


def _parse_list(text: str, kind, flag: str):
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"{flag}: cannot parse {text!r}") from None


def cmd_gradcheck(args, man: RunManifest) -> int:
    seeds = _parse_list(args.seeds, int, "--seeds") if args.seeds else [man.seed]
    if not seeds:
        raise InputError("--seeds is empty")
    man.config = {"scale": args.scale, "seeds": seeds, "model": T.desk_gradcheck_config().to_dict()}
    out = _run_jobs(_gradcheck_job, seeds, args.jobs)
    reports = [r for r, _ in out]
    for s, (r, secs) in zip(seeds, out):
        print(f"seed {s}: max rel err {r['max_rel_err']:.3e}  {'ok' if r['passed'] else 'FAIL'}  {secs:.1f}s")
    summary = {
        "schema": SCHEMA,
        "seeds": seeds,
        "reports": reports,
        "max_rel_err": max(r["max_rel_err"] for r in reports),
        "passed": all(r["passed"] for r in reports),
    }
    man.result = {"max_rel_err": summary["max_rel_err"], "seconds": [secs for _, secs in out]}
    if args.out:
        dump_json(summary, args.out)
        man.outputs.append(args.out)
    if not summary["passed"]:
        raise NumericFailure(f"max relative error {summary['max_rel_err']:.3e} exceeds tolerance")
    return EXIT_OK


# -- pck ------------------------------------------------------------------------


def _load_keypoints(path) -> KeypointSet:
    try:
        return KeypointSet.load(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: expected {{size: [H, W], points: [[x, y], ...]}} ({exc})") from None


def format_pck_table(report) -> str:
    lines = [f"{'alpha':>6}  {'correct':>7}  {'total':>5}  {'pck':>6}"]
    for a, c, p in zip(report.alphas, report.correct, report.pck):
        lines.append(f"{a:>6.2f}  {c:>7d}  {report.total:>5d}  {p:>6.4f}")
    return "\n".join(lines)


def cmd_pck(args, man: RunManifest) -> int:
    alphas = _parse_list(args.alpha, float, "--alpha")
    if not alphas:
        raise InputError("--alpha is empty")
    man.add_input(args.pred)
    man.add_input(args.gt)
    man.config = {"alpha": alphas, "mode": args.mode}
    pred, gt = _load_keypoints(args.pred), _load_keypoints(args.gt)
    gt.check_bounds()
    rep = pck(pred, gt, alphas, args.mode)
    print(format_pck_table(rep))
    man.result = rep.to_dict()
    if args.out:
        dump_json(rep.to_dict(), args.out)
        man.outputs.append(args.out)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dccnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"falls back to ${SEED_ENV}, then 0")
        sp.add_argument("--manifest", default=None, help="run manifest path")

    m = sub.add_parser("match", help="match a feature-map pair")
    m.add_argument("--src")
    m.add_argument("--tgt")
    m.add_argument("--pairs", help="JSON list of {src, tgt} objects")
    m.add_argument("--params", required=True)
    m.add_argument("--fuse-input", choices=("consensus", "embedded"), default=None)
    m.add_argument("--direction", choices=("ab", "ba", "both"), default="ab")
    m.add_argument("--out", required=True)
    m.add_argument("--dump-corr", help="directory for the c_l, c_s and fused volumes")
    m.add_argument("--jobs", type=int, default=1)
    common(m)

    t = sub.add_parser("train-toy", help="train on synthetic shifted and independent pairs")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--trace")
    common(t)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    g.add_argument("--scale", choices=("desk",), default="desk")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out")
    common(g)

    k = sub.add_parser("pck", help="percentage of correct keypoints")
    k.add_argument("--pred", required=True)
    k.add_argument("--gt", required=True)
    k.add_argument("--alpha", default="0.05,0.10,0.15")
    k.add_argument("--mode", choices=("image", "bbox"), default="image")
    k.add_argument("--out")
    common(k)
    return p


COMMANDS = {"match": cmd_match, "train-toy": cmd_train_toy, "gradcheck": cmd_gradcheck, "pck": cmd_pck}
_INPUT_ERRORS = (InputError, FileNotFoundError, IsADirectoryError, FmapError, M.DccpError,
                 ShapeError, KeypointError, ValueError)


def _manifest_path(args) -> str:
    if args.manifest:
        return args.manifest
    out = getattr(args, "out", None)
    return f"{out}.manifest.json" if out else f"{args.command}.manifest.json"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(args.command)
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        man.seed = resolve_seed(args.seed)
        if getattr(args, "jobs", 1) < 1:
            raise InputError("--jobs must be >= 1")
        code = COMMANDS[args.command](args, man)
    except (NumericFailure, FloatingPointError) as exc:
        code, kind = EXIT_NUMERIC, "numeric_failure"
        man.error = {"kind": kind, "message": str(exc)}
    except _INPUT_ERRORS as exc:
        code, kind = EXIT_INPUT, "input_error"
        man.error = {"kind": kind, "type": type(exc).__name__, "message": str(exc)}
    man.wall_time_s = time.perf_counter() - t0
    man.status = "ok" if code == EXIT_OK else man.error["kind"]
    if man.error:
        print(json.dumps({"schema": SCHEMA, "error": man.error}), file=sys.stderr)
    if code == EXIT_OK:
        missing = [p for p in man.outputs if not Path(p).exists()]
        if missing:  # guards the manifest invariant
            man.status, code = "input_error", EXIT_INPUT
            man.error = {"kind": "input_error", "message": f"outputs not written: {missing}"}
    try:
        dump_json(man.to_dict(), _manifest_path(args))
    except OSError as exc:
        log.error("could not write manifest: %s", exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
