import csv
import math

import numpy as np
import pytest

from cloudlstm.evaluation import (C1, C2, MetricReport, copy_last_baseline, evaluate,
                                  format_table, mae_rmse, per_channel_mae, psnr, ssim,
                                  write_report_csv)
from cloudlstm.tensor import DimensionError


# pure-Python transcriptions of the metric formulas, over flattened frames

def t_mae(p, t):
    return sum(abs(a - b) for a, b in zip(p, t)) / len(p)


def t_mse(p, t):
    return sum((a - b) ** 2 for a, b in zip(p, t)) / len(p)


def t_psnr(p, t, v_max):
    return 20 * math.log10(v_max) - 10 * math.log10(t_mse(p, t))


def t_ssim(p, t, mu=None):
    n = len(p)
    mp = sum(p) / n
    mt = sum(t) / n
    mu = mt if mu is None else mu
    var_p = sum((a - mp) ** 2 for a in p) / n
    var_t = sum((b - mt) ** 2 for b in t) / n
    cov = sum((a - mp) * (b - mt) for a, b in zip(p, t)) / n
    c1, c2 = (0.1 * 2) ** 2, (0.3 * 2) ** 2
    return (2 * mp * mu + c1) * (2 * cov + c2) / ((mp ** 2 * mu ** 2 + c1) * (var_t * var_p + c2))


def flat(a):
    return [float(v) for v in np.ravel(a)]


class TestMaeRmse:
    def test_identical(self, rng):
        x = rng.normal(size=(5, 2))
        assert mae_rmse(x, x) == (0.0, 0.0)

    def test_hand_example(self):
        mae, rmse = mae_rmse(np.array([[3.0], [-4.0]]), np.zeros((2, 1)))
        assert mae == 3.5
        assert abs(rmse - 3.5355339) < 1e-7

    def test_rmse_dominates(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = rng.integers(1, 20)
            mae, rmse = mae_rmse(rng.normal(size=n), rng.normal(size=n))
            assert rmse >= mae >= 0

    def test_symmetry(self, rng):
        a, b = rng.normal(size=(2, 7, 3))
        assert mae_rmse(a, b) == mae_rmse(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mae_rmse(np.zeros(3), np.zeros(4))


class TestPsnr:
    def test_spot_value(self):
        # MSE = 1 with v_max = 2
        assert abs(psnr(np.ones(4), np.zeros(4), 2.0) - 6.0206) < 1e-4
        assert abs(psnr(np.ones(4), np.zeros(4), 2.0) - 20 * math.log10(2)) < 1e-9

    def test_zero_when_mse_equals_vmax_squared(self):
        assert psnr(np.ones(3), np.zeros(3), 1.0) == 0.0

    def test_halving_mse(self, rng):
        t = rng.normal(size=50)
        e = rng.normal(size=50)
        gap = psnr(t + e / math.sqrt(2), t, 3.0) - psnr(t + e, t, 3.0)
        assert abs(gap - 10 * math.log10(2)) < 1e-9

    def test_exact_match_capped(self):
        assert psnr(np.ones(3), np.ones(3), 1.0) == 300.0

    def test_monotone(self, rng):
        t = rng.normal(size=20)
        e = rng.normal(size=20)
        vals = [psnr(t + s * e, t, 2.0) for s in (0.1, 0.5, 1.0, 2.0)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestSsim:
    def test_constants(self):
        assert abs(C1 - 0.04) < 1e-15 and abs(C2 - 0.36) < 1e-15

    def test_constant_identical_frames(self):
        x = np.full((4, 1), 0.5)
        # variances and covariance vanish; only the stabilisers remain
        expect = (2 * 0.25 + 0.04) * 0.36 / ((0.0625 + 0.04) * 0.36)
        assert abs(ssim(x, x) - expect) < 1e-12

    def test_self_similarity_matches_oracle(self, rng):
        x = rng.uniform(size=(6, 2))
        assert abs(ssim(x, x) - t_ssim(flat(x), flat(x))) <= 1e-12

    def test_supplied_mean(self, rng):
        p, t = rng.uniform(size=(2, 8))
        assert abs(ssim(p, t, mu_v=0.3) - t_ssim(flat(p), flat(t), 0.3)) <= 1e-12


def test_metric_fidelity_100_pairs():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 30)), int(rng.integers(1, 4)))
        t = rng.uniform(0, 1, size=shape)
        p = t + rng.normal(0, 0.2, size=shape)
        v_max = float(t.max()) + 0.1
        mae, rmse = mae_rmse(p, t)
        ref = (t_mae(flat(p), flat(t)), math.sqrt(t_mse(flat(p), flat(t))),
               t_psnr(flat(p), flat(t), v_max), t_ssim(flat(p), flat(t)))
        got = (mae, rmse, psnr(p, t, v_max), ssim(p, t))
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    assert worst <= 1e-12


class TestBaseline:
    def test_repeats_last_frame(self, rng):
        hist = rng.normal(size=(4, 2, 5, 3))
        out = copy_last_baseline(hist, 3)
        assert out.shape == (3, 2, 5, 3)
        assert all(np.array_equal(out[j], hist[-1]) for j in range(3))

    def test_batched(self, rng):
        hist = rng.normal(size=(7, 4, 2, 5, 3))
        out = copy_last_baseline(hist, 2)
        assert out.shape == (7, 2, 2, 5, 3)
        assert np.array_equal(out[:, 1], hist[:, -1])

    def test_constant_stream(self):
        hist = np.full((3, 1, 4, 1), 2.5)
        mae, _ = mae_rmse(copy_last_baseline(hist, 4), np.full((4, 1, 4, 1), 2.5))
        assert mae == 0.0

    @pytest.mark.parametrize("slope", [0.5, -1.25])
    def test_linear_drift(self, slope):
        m, j = 4, 6
        t = np.arange(m + j, dtype=float)
        stream = (slope * t)[:, None, None, None] * np.ones((1, 2, 3, 1))
        base = copy_last_baseline(stream[:m], j)
        mae, _ = mae_rmse(base, stream[m:])
        assert abs(mae - abs(slope) * (j + 1) / 2) < 1e-12


class TestReport:
    def _data(self, rng, s=5, j=3):
        truth = np.concatenate([rng.uniform(size=(s, j, 2, 6, 1)), rng.uniform(size=(s, j, 2, 6, 2))], -1)
        pred = truth.copy()
        pred[..., :1] += rng.normal(0, 0.1, size=pred[..., :1].shape)
        return pred, truth

    def test_aggregates(self, rng):
        pred, truth = self._data(rng)
        rep = evaluate(pred, truth, 1, name="m")
        assert rep.raw["MAE"].shape == (5, 3)
        assert rep.per_step["RMSE"].shape == (3, 2)
        assert np.all(rep.raw["RMSE"] >= rep.raw["MAE"])
        mu, sd = rep.aggregate["MAE"]
        assert mu == pytest.approx(np.mean([mae_rmse(pred[a, b, ..., :1], truth[a, b, ..., :1])[0]
                                            for a in range(5) for b in range(3)]), abs=1e-15)
        assert sd >= 0

    def test_coordinates_ignored(self, rng):
        pred, truth = self._data(rng)
        a = evaluate(pred, truth, 1)
        pred[..., 1:] += 5.0
        b = evaluate(pred, truth, 1)
        assert a.aggregate == b.aggregate

    def test_vmax_defaults_to_truth_max(self, rng):
        pred, truth = self._data(rng)
        a = evaluate(pred, truth, 1)
        b = evaluate(pred, truth, 1, v_max=float(truth[..., :1].max()))
        assert a.aggregate["PSNR"] == b.aggregate["PSNR"]

    def test_per_channel(self, rng):
        pred, truth = self._data(rng)
        ch = per_channel_mae(pred, truth, 1)
        assert ch.shape == (2,)
        assert ch[1] == pytest.approx(np.abs(pred[:, :, 1, :, 0] - truth[:, :, 1, :, 0]).mean(), abs=1e-15)

    def test_csv_and_table(self, rng, tmp_path):
        pred, truth = self._data(rng)
        reps = [evaluate(pred, truth, 1, name="model"), evaluate(truth, truth, 1, name="oracle")]
        write_report_csv(tmp_path / "r.csv", reps, {"model": per_channel_mae(pred, truth, 1)})
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert len(rows) == 2 * 4
        agg = [r for r in rows if r["step"] == "all"]
        assert [r["model"] for r in agg] == ["model", "oracle"]
        assert float(agg[0]["MAE_mean"]) == reps[0].aggregate["MAE"][0]
        assert agg[1]["MAE_ch0"] == "nan"
        table = format_table(reps)
        lines = table.splitlines()
        assert lines[0].split() == ["Model"] + list(MetricReport.METRICS)
        assert lines[2].startswith("model") and "±" in lines[2]
