import csv

import numpy as np
import pytest

from dccnet import model as M
from dccnet.features import SynthPairSpec, random_pair, synth_pair
from dccnet.matching import LossConfig, multi_aux_loss, weak_loss
from dccnet.trainer import (
    AdamState,
    Sample,
    TrainConfig,
    adam_step,
    desk_gradcheck_config,
    gradcheck_all,
    hit_rate,
    make_toy_dataset,
    smooth,
    train_toy,
    write_trace,
)

TINY = M.ModelConfig(grid=(3, 3), d=4, k=3, l=5, nc_channels=(1, 2, 1), embed_channels=(1, 2, 1))


def tiny_pair(seed=0, y=1.0):
    a, b, gt = synth_pair(SynthPairSpec(3, 3, 4, "shift", (1, 0), 0.1, seed))
    return Sample(a, b, y, gt)


class TestConfig:
    def test_full_size_shapes(self):
        cfg = M.ModelConfig.full_size()
        assert (cfg.grid, cfg.d, cfg.k, cfg.l, cfg.nc_kernel) == ((25, 25), 1024, 25, 1024, 5)

    @pytest.mark.parametrize("bad", [dict(k=4), dict(grid=(0, 3)), dict(nc_channels=(2, 1)),
                                     dict(fuse_input="raw"), dict(embed_kernel=2)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            M.ModelConfig(**bad)

    def test_train_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        assert TrainConfig().lr == 5e-4
        assert TrainConfig(epochs=3, batch_size=4).total_steps(10) == 9


class TestInit:
    def test_deterministic(self):
        p, q = M.init_params(TINY, 3), M.init_params(TINY, 3)
        for k, v in p.named().items():
            assert v.tobytes() == q.named()[k].tobytes()

    def test_seeds_differ(self):
        p, q = M.init_params(TINY, 3), M.init_params(TINY, 4)
        assert all(not np.array_equal(v, q.named()[k]) for k, v in p.named().items())

    def test_shapes_match_config(self):
        p = M.init_params(desk_gradcheck_config(), 0)
        p.check()
        named = p.named()
        assert named["context.W"].shape == (8 + 25, 16)
        assert named["attention.weight"].shape == (2, 72)
        assert named["consensus.1.weight"].shape == (16, 16, 3, 3, 3, 3)

    def test_fan_in_bounds(self):
        p = M.init_params(TINY, 0)
        assert np.all(np.abs(p.W) <= 1 / np.sqrt(4 + 9))
        k = p.consensus.kernels[1]
        assert np.all(np.abs(k.weight) <= 1 / np.sqrt(2 * 81))
        assert np.all(np.abs(p.attention.weight) <= 1 / np.sqrt(18))

    def test_full_size_consistent(self):
        cfg = M.ModelConfig.full_size()
        assert cfg.d + cfg.k ** 2 == 1649 and 2 * cfg.n_cells == 1250


class TestForward:
    def test_grid_mismatch(self):
        p = M.init_params(TINY, 0)
        a, b = random_pair(4, 3, 4, 0)
        with pytest.raises(M.GridMismatchError, match="grid mismatch"):
            M.forward(p, a, b)

    def test_outputs_and_loss_bound(self):
        p = M.init_params(TINY, 0)
        s = tiny_pair()
        f = M.forward(p, s.a, s.b)
        assert f.fused_ab.shape == f.c_l.shape == (3, 3, 3, 3)
        assert all(np.all((m > 0) & (m < 1)) for m in f.masks.values())
        t = multi_aux_loss(f.fused_ab, f.fused_ba, f.c_l, f.c_s, 1.0)
        assert abs(t.total) <= 2 * 3

    def test_delta_pipeline_matches_identity(self):
        cfg = M.ModelConfig(grid=(5, 5), d=8, k=3, l=8)
        p = M.init_params(cfg, 0, consensus_init="delta", embed_init="delta")
        a, b, _ = synth_pair(SynthPairSpec(5, 5, 8, "identity", seed=1))
        f = M.forward(p, a, b)
        from dccnet.matching import hard_assign
        src = hard_assign(f.fused_ab).source
        for m in range(1, 4):
            for n in range(1, 4):
                assert tuple(src[m, n]) == (m, n)

    def test_stage_recompute_matches_full(self):
        p = M.init_params(TINY, 1)
        s = tiny_pair(1)
        base = M.forward(p, s.a, s.b)
        q = p.copy()
        q.W[0, 0] += 0.3
        q.attention.bias[0] += 0.2
        full = M.forward(q, s.a, s.b)
        part = M.forward_from(q, base, "context")
        np.testing.assert_array_equal(full.fused_ab, part.fused_ab)
        np.testing.assert_array_equal(full.fused_ba, part.fused_ba)


class TestSerialization:
    def test_dccp_round_trip_bitwise(self, tmp_path):
        p = M.init_params(desk_gradcheck_config(), 5)
        M.save_params(p, tmp_path / "m.dccp")
        q = M.load_params(tmp_path / "m.dccp")
        assert q.config == p.config
        for k, v in p.named().items():
            assert q.named()[k].tobytes() == v.tobytes()
        M.save_params(q, tmp_path / "n.dccp")
        assert (tmp_path / "m.dccp").read_bytes() == (tmp_path / "n.dccp").read_bytes()

    def test_record_layout(self, tmp_path):
        M.save_params(M.init_params(TINY, 0), tmp_path / "m.dccp")
        raw = (tmp_path / "m.dccp").read_bytes()
        assert raw[:4] == b"DCCP" and raw[4:6] == b"\x01\x00"
        assert set(M.read_records(tmp_path / "m.dccp")) == {"config", *M.init_params(TINY, 0).named()}

    def test_switches_survive(self, tmp_path):
        p = M.with_config(M.init_params(TINY, 0), fuse_input="embedded", symmetric=False)
        M.save_params(p, tmp_path / "m.dccp")
        cfg = M.load_params(tmp_path / "m.dccp").config
        assert cfg.fuse_input == "embedded" and not cfg.symmetric

    def test_bad_magic_and_truncation(self, tmp_path):
        M.save_params(M.init_params(TINY, 0), tmp_path / "m.dccp")
        raw = (tmp_path / "m.dccp").read_bytes()
        (tmp_path / "x.dccp").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(M.DccpError, match="magic"):
            M.load_params(tmp_path / "x.dccp")
        (tmp_path / "t.dccp").write_bytes(raw[:-5])
        with pytest.raises(M.DccpError, match="truncated"):
            M.load_params(tmp_path / "t.dccp")


class TestAdam:
    def test_zero_gradient(self):
        p = {"x": np.array([1.0, -2.0])}
        q, st = adam_step(p, {"x": np.zeros(2)}, AdamState.zeros_like(p), TrainConfig())
        np.testing.assert_array_equal(q["x"], p["x"])
        assert np.all(st.m["x"] == 0) and np.all(st.v["x"] == 0)

    def test_first_step_bounded_by_lr(self):
        rng = np.random.default_rng(0)
        p = {"x": rng.standard_normal(20)}
        cfg = TrainConfig(lr=1e-3)
        q, _ = adam_step(p, {"x": rng.standard_normal(20)}, AdamState.zeros_like(p), cfg)
        assert np.all(np.abs(q["x"] - p["x"]) <= cfg.lr * (1 + 1e-6))

    def test_quadratic_convergence(self):
        p = {"x": np.array(1.0)}
        st = AdamState.zeros_like(p)
        cfg = TrainConfig(lr=0.1)
        for _ in range(100):
            p, st = adam_step(p, {"x": 2 * p["x"]}, st, cfg)
        assert abs(p["x"]) < 0.05

    def test_shape_mismatch(self):
        p = {"x": np.zeros(3)}
        with pytest.raises(ValueError):
            adam_step(p, {"x": np.zeros(2)}, AdamState.zeros_like(p), TrainConfig())
        with pytest.raises(ValueError):
            adam_step(p, {"y": np.zeros(3)}, AdamState.zeros_like(p), TrainConfig())


class TestTraining:
    def test_label_checks(self):
        with pytest.raises(ValueError):
            train_toy([], M.init_params(TINY, 0), TrainConfig(steps=1))
        with pytest.raises(ValueError):
            train_toy([tiny_pair()], M.init_params(TINY, 0), TrainConfig(steps=1))

    def test_single_positive_pair_overfits(self):
        cfg = desk_gradcheck_config()
        a, b, gt = synth_pair(SynthPairSpec(6, 6, 8, "shift", (1, 1), 0.1, 0))
        r = train_toy([Sample(a, b, 1.0, gt)], M.init_params(cfg, 0), TrainConfig(steps=50, seed=0),
                      require_both_labels=False)
        sm = smooth(r.totals())
        assert np.all(np.diff(sm) < 0)
        assert (sm[0] - sm[-1]) >= 0.2 * abs(sm[0])

    def test_deterministic_traces(self):
        data = [tiny_pair(0), tiny_pair(1, -1.0), tiny_pair(2)]
        runs = [train_toy(data, M.init_params(TINY, 0), TrainConfig(steps=6, seed=3)) for _ in range(2)]
        assert [r.total for r in runs[0].trace] == [r.total for r in runs[1].trace]
        for k, v in runs[0].params.named().items():
            assert v.tobytes() == runs[1].params.named()[k].tobytes()

    def test_zero_aux_weights_trace_is_fuse_loss(self):
        data = [tiny_pair(0), tiny_pair(1, -1.0)]
        r = train_toy(data, M.init_params(TINY, 0), TrainConfig(steps=4, seed=0, lam=0, gamma=0))
        assert all(row.total == row.fuse for row in r.trace)
        # first step of a manual fuse-only loss on the first shuffled pair
        first = data[np.random.default_rng(0).permutation(2)[0]]
        f = M.forward(M.init_params(TINY, 0), first.a, first.b)
        assert r.trace[0].fuse == weak_loss(f.fused_ab, f.fused_ba, first.y)

    def test_epoch_means_and_best_epoch(self):
        data = [tiny_pair(0), tiny_pair(1, -1.0)]
        val = [tiny_pair(5)]
        r = train_toy(data, M.init_params(TINY, 0), TrainConfig(steps=5, seed=0), val=val)
        assert len(r.epoch_means) == 3 == len(r.val_scores)
        assert r.val_scores[r.best_epoch] == max(r.val_scores)
        assert hit_rate(r.params, val) == max(r.val_scores)

    def test_batched_steps(self):
        data = [tiny_pair(0), tiny_pair(1, -1.0), tiny_pair(2)]
        r = train_toy(data, M.init_params(TINY, 0), TrainConfig(seed=0, epochs=2, batch_size=2))
        assert len(r.trace) == 4 and len(r.epoch_means) == 2

    def test_toy_dataset(self):
        data = make_toy_dataset(3, 2, (4, 4), 4, 1, 0.1, 0)
        assert [s.y for s in data] == [1.0] * 3 + [-1.0] * 2
        assert all(s.gt is not None for s in data[:3]) and data[3].gt is None

    def test_write_trace(self, tmp_path):
        r = train_toy([tiny_pair(0), tiny_pair(1, -1.0)], M.init_params(TINY, 0), TrainConfig(steps=3))
        write_trace(r.trace, tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["step", "L_fuse", "L_local", "L_context", "total"]
        assert len(rows) == 4 and float(rows[3][4]) == r.trace[2].total

    def test_smooth(self):
        np.testing.assert_allclose(smooth([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


class TestGradcheck:
    def test_every_tensor_once_and_passes(self):
        p = M.init_params(TINY, 0)
        rep = gradcheck_all(p, tiny_pair(0), n_coords=5)
        assert [t.name for t in rep.tensors] == list(p.named())
        assert rep.passed, rep.to_dict()

    def test_zeroed_attention_bias_gradient(self):
        p = M.init_params(TINY, 2)
        p.attention.weight[:] = 0
        rep = gradcheck_all(p, tiny_pair(2), n_coords=3)
        bias = next(t for t in rep.tensors if t.name == "attention.bias")
        assert bias.coords == 2 and bias.max_rel_err <= 1e-4

    def test_negative_pair_and_custom_weights(self):
        p = M.init_params(TINY, 1)
        rep = gradcheck_all(p, tiny_pair(1, -1.0), LossConfig(0.5, 2.0), n_coords=4)
        assert rep.passed, rep.to_dict()
