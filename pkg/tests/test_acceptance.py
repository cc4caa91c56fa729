"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in the terminal summary. This module is moved
to the end of the run by conftest so the intactness tally covers every
other test.
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from cloudlstm import bench, intactness
from cloudlstm import tensor as T
from cloudlstm.data_io import WindowSet, synth_diffusion, window_dataset
from cloudlstm.dconv import DConvConfig, DConvWeights, dconv, dconv_apply, dconv_reference, dconv_weighting
from cloudlstm.evaluation import copy_last_baseline, evaluate, mae_rmse, psnr, ssim
from cloudlstm.forecaster import CloudForecaster, ForecasterConfig
from cloudlstm.pointcloud import PointCloudFrame, exhaustive_knn, gather_points, kdtree_knn, knn_batch, normalize_coords
from cloudlstm.recurrent import CellWeights, RecurrentState, cell_step, init_state
from cloudlstm.tensor import Tensor
from cloudlstm.training import TrainConfig, evaluate_loss, fit, split_dataset

from conftest import ACCEPTANCE, gradcheck, random_features
from test_evaluation import flat, t_mae, t_mse, t_psnr, t_ssim


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def test_01_permutation_invariance():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        u = int(rng.integers(1, 5))
        k = int(rng.integers(1, 10))
        n = int(rng.integers(max(k, 2), 65))
        cfg = ForecasterConfig(stacks=int(rng.integers(1, 3)), hidden_channels=int(rng.integers(1, 5)),
                               k_neighbors=k, history=int(rng.integers(1, 4)), horizon=int(rng.integers(1, 4)),
                               cell=str(rng.choice(["lstm", "gru", "rnn"])), attention=bool(rng.integers(2)),
                               emit_coordinates=bool(rng.integers(2)))
        model = CloudForecaster.init(cfg, u, 1, 2, seed=int(rng.integers(1 << 30)))
        coords = rng.uniform(size=(u, n, 2))
        vals = rng.normal(size=(cfg.history, u, n, 1))
        hist = np.concatenate([vals, np.broadcast_to(coords, (cfg.history, u, n, 2))], axis=-1)
        perm = rng.permutation(n)
        a = model.forecast(hist)
        b = model.forecast(hist[..., perm, :])
        worst = max(worst, float(np.max(np.abs(a[..., perm, :] - b))))
    secs = time.perf_counter() - start
    ok = worst <= 1e-9 and secs < 120
    record(1, ok, f"50 configs, max |diff| {worst:.2e} (<= 1e-9), {secs:.1f} s (< 120 s)")
    assert ok


def test_02_information_intactness():
    checks, violations = intactness.totals()
    sites = intactness.by_site()
    covered = all(s in sites for s in ("dconv", "cell_step", "forecast"))
    ok = checks > 0 and violations == 0 and covered
    record(2, ok, f"{checks} point-count checks over sites {sorted(sites)}, {violations} violations")
    assert ok


def test_03_shift_scale_invariance():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(1000):
        raw = rng.uniform(size=(int(rng.integers(2, 50)), int(rng.integers(1, 4))))
        a = 10.0 * (1.0 - rng.uniform())  # (0, 10]
        b = rng.uniform(-10.0, 10.0)
        worst = max(worst, float(np.max(np.abs(normalize_coords(a * raw + b) - normalize_coords(raw)))))
    ok = worst <= 1e-12
    record(3, ok, f"1000 transforms, max |diff| {worst:.2e} (<= 1e-12)")
    assert ok


def test_04_path_equivalence():
    rng = np.random.default_rng(404)
    start = time.perf_counter()
    worst = 0.0
    for i in range(120):
        u_in, u_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, l = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 10))
        n = int(rng.integers(k, 41))
        frame = PointCloudFrame(rng.normal(size=(u_in, n, h)), rng.uniform(size=(u_in, n, l)))
        w = DConvWeights(rng.normal(size=(u_in, k, h + l, h + l, u_out)) * 0.3, rng.normal(size=u_out))
        cfg = DConvConfig(k, coord_sigmoid=bool(i % 2))
        fast = dconv_apply(frame, w, cfg).features()
        ref = dconv_reference(frame, w, cfg).features()
        worst = max(worst, float(np.max(np.abs(fast - ref))))
    secs = time.perf_counter() - start
    ok = worst <= 1e-9 and secs < 60
    record(4, ok, f"120 shapes, max |diff| {worst:.2e} (<= 1e-9), {secs:.1f} s (< 60 s)")
    assert ok


def _operator_cases(rng):
    a = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
    kern = Tensor(rng.normal(size=(1, 3, 2, 3)), requires_grad=True)
    pts = Tensor(random_features(rng, (2,), 7), requires_grad=True)
    idx = knn_batch(pts.data[..., 1:], 3)
    dw = DConvWeights(Tensor(rng.normal(size=(2, 3, 3, 3, 2)) * 0.3, True), Tensor(rng.normal(size=2), True))
    # well-separated grid so tiny nudges cannot reorder neighbours of the full operator
    g = np.stack(np.meshgrid(np.linspace(0, 1, 3), np.linspace(0, 1, 2)), -1).reshape(1, 6, 2)
    grid = Tensor(np.concatenate([rng.normal(size=(1, 6, 1)), g + rng.uniform(-0.01, 0.01, g.shape)], -1), True)
    gw = DConvWeights(Tensor(rng.normal(size=(1, 2, 3, 3, 2)) * 0.3, True), Tensor(np.zeros(2), True))
    ab = {"a": a, "b": b}
    return {
        "add": (lambda: T.add(a, b), ab),
        "sub": (lambda: T.sub(a, b), ab),
        "mul": (lambda: T.mul(a, b), ab),
        "scale": (lambda: T.scale(a, -2.5), ab),
        "square": (lambda: T.square(a), ab),
        "abs": (lambda: T.absolute(a), ab),
        "sigmoid": (lambda: T.sigmoid(a), ab),
        "tanh": (lambda: T.tanh(a), ab),
        "reshape": (lambda: T.reshape(a, (2, 6)), ab),
        "transpose": (lambda: T.transpose(a, (1, 0)), ab),
        "concat": (lambda: T.concat([a, c], axis=1), {"a": a, "c": c}),
        "index": (lambda: a[np.array([0, 2, 2]), 1:3], ab),
        "gather": (lambda: T.gather(a, np.array([3, 0, 0, 2]), axis=1), ab),
        "broadcast": (lambda: T.broadcast_to(c[:, :1], (2, 3, 4)), {"c": c}),
        "sum": (lambda: T.reduce_sum(a, axis=1), ab),
        "mean": (lambda: T.mean(a, axis=0), ab),
        "softmax": (lambda: T.softmax(a, axis=1), ab),
        "conv2d": (lambda: T.conv2d(x, kern), {"x": x, "kernel": kern}),
        "gather_points": (lambda: gather_points(pts, idx), {"x": pts}),
        "dconv_weighting": (lambda: dconv_weighting(pts, idx, dw), {"x": pts, "w": dw.w, "b": dw.b}),
        "dconv_gate": (lambda: dconv(pts, dw, 1, coord_sigmoid_on=False), {"w": dw.w, "b": dw.b}),
        "dconv_full": (lambda: dconv(grid, gw, 1), {"x": grid, "w": gw.w, "b": gw.b}),
    }


def _cell_case(kind, rng):
    w = CellWeights.init(kind, 1, 2, 2, 1, 3, rng)
    for d in w.named().values():
        d.b.data[...] = rng.normal(size=d.b.shape) * 0.5
    xs = [random_features(rng, (1,), 5) for _ in range(3)]
    s0 = init_state(xs[0], 2, 1, with_cell=(kind == "lstm"))
    s0.hidden.data[..., :1] = rng.normal(size=(2, 5, 1))

    def build():
        st = RecurrentState(Tensor(s0.hidden.data), None if s0.cell is None else Tensor(np.zeros(s0.cell.shape)))
        for xt in xs:
            st = cell_step(Tensor(xt), st, w)
        return st.hidden

    params = {f"{name}.{p}": t for name, d in w.named().items() for p, t in (("w", d.w), ("b", d.b))}
    return build, params


def test_05_gradient_correctness():
    rng = np.random.default_rng(505)
    cases = _operator_cases(rng)
    for kind in ("lstm", "gru", "rnn"):
        cases[f"{kind}_cell"] = _cell_case(kind, rng)
    errs = {}
    for name, (build, params) in cases.items():
        proj = Tensor(rng.normal(size=build().shape))
        e = gradcheck(lambda: T.reduce_sum(build() * proj), params, samples=30, seed=1)
        errs[name] = max(e.values())
    for attention in (False, True):
        m = CloudForecaster.init(ForecasterConfig(stacks=2, hidden_channels=4, k_neighbors=2, history=2,
                                                  horizon=2, attention=attention), 1, 1, 2, seed=5)
        hist = np.concatenate([rng.normal(size=(1, 2, 1, 5, 1)),
                               np.broadcast_to(rng.uniform(size=(1, 5, 2)), (1, 2, 1, 5, 2))], -1)
        tgt = rng.normal(size=(1, 2, 1, 5, 1))

        def loss():
            d = m.forward(Tensor(hist))[..., :1] - Tensor(tgt)
            return (d * d).sum()

        e = gradcheck(loss, m.named_parameters(), samples=20, seed=2)
        errs[f"model{'+attention' if attention else ''}"] = max(e.values())
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4
    record(5, ok, f"{len(errs)} operators/models, worst rel err {errs[worst]:.2e} ({worst}) (< 1e-4)")
    assert ok, errs


def test_06_knn_oracle():
    rng = np.random.default_rng(606)
    queries = mismatched = 0
    while queries < 1000:
        n = int(rng.integers(10, 2001))
        l = int(rng.choice([2, 3]))
        k = int(rng.integers(1, min(n, 16) + 1))
        pts = rng.uniform(size=(n, l))
        if queries % 3 == 0:
            pts = np.round(pts * 8) / 8  # lattice with many exact ties and duplicates
        tree = kdtree_knn(pts, k)
        brute = exhaustive_knn(pts, k)
        rows = rng.choice(n, min(n, 100), replace=False)
        mismatched += int(np.sum(np.any(tree[rows] != brute[rows], axis=1)))
        queries += len(rows)
    ok = mismatched == 0
    record(6, ok, f"{queries} queries, {mismatched} differ in indices or order")
    assert ok


def test_07_complexity_scaling():
    sizes = [256, 512, 1024, 2048, 4096]
    dconv_rows = bench.bench_dconv(sizes)
    knn_rows = bench.bench_knn(sizes)
    r2 = bench.summarize(dconv_rows)["r_squared"]
    expo = bench.summarize(knn_rows)["loglog_exponent"]
    ok = r2 > 0.95 and expo < 1.5
    ms = " ".join(f"{r['seconds'] * 1e3:.3f}" for r in dconv_rows)
    record(7, ok, f"D-Conv weighting ms [{ms}] linear R^2 {r2:.4f} (> 0.95), KNN log-log exponent {expo:.3f} (< 1.5)")
    assert ok


def test_08_overfit():
    ds = synth_diffusion(30, 2, 20 + 6 + 6 - 1, seed=3)
    w = window_dataset(ds, 6, 6)
    assert len(w) == 20
    model = CloudForecaster.init(ForecasterConfig(stacks=1, hidden_channels=8, k_neighbors=3, history=6, horizon=6),
                                 ds.U, 1, 2, seed=0)
    start = time.perf_counter()

    def done(epoch, train_mse, _val):
        # the running epoch loss mixes pre- and post-update batches; confirm on the full set
        return epoch % 10 == 0 and train_mse < 1e-3 and evaluate_loss(model, w.history, w.target) < 1e-3

    res = fit(model, w, TrainConfig(lr=0.01, epochs=2000, batch_size=4, seed=0), on_epoch=done)
    secs = time.perf_counter() - start
    final = evaluate_loss(model, w.history, w.target)
    epochs = len(res.loss_log)
    ok = final < 1e-3 and secs < 600
    record(8, ok, f"train MSE {final:.2e} (< 1e-3) after {epochs} epochs (<= 2000), {secs:.0f} s (< 600 s)")
    assert ok


SKILL_EPOCHS = {"lstm": 8, "gru": 6, "rnn": 16}


def _skill(cell, train, test):
    cfg = ForecasterConfig(stacks=1, hidden_channels=8, k_neighbors=3, history=6, horizon=6, cell=cell)
    model = CloudForecaster.init(cfg, 2, 1, 2, seed=0)
    fit(model, train, TrainConfig(lr=5e-3, epochs=SKILL_EPOCHS[cell], batch_size=8, seed=0))
    pred = np.concatenate([model.forecast(test.history[s:s + 32]) for s in range(0, len(test), 32)])
    return evaluate(pred, test.target, 1, name=cell).aggregate["MAE"][0]


def test_09_forecast_skill():
    ds = synth_diffusion(100, 2, 500, seed=11)
    trainval, test = split_dataset(window_dataset(ds, 6, 6), 0.8)
    keep = np.arange(0, len(trainval), 2)  # every other window keeps the run short
    train = WindowSet(trainval.history[keep], trainval.target[keep], trainval.starts[keep])
    base = evaluate(copy_last_baseline(test.history, 6), test.target, 1).aggregate["MAE"][0]
    mae = {cell: _skill(cell, train, test) for cell in ("lstm", "gru", "rnn")}
    ratio = {c: v / base for c, v in mae.items()}
    ordered = mae["lstm"] <= mae["gru"] <= mae["rnn"]
    ok = ratio["lstm"] <= 0.9 and ratio["gru"] < 1.0 and ratio["rnn"] < 1.0
    record(9, ok, f"MAE / copy-last: LSTM {ratio['lstm']:.3f} (<= 0.9), GRU {ratio['gru']:.3f} (< 1), "
                  f"RNN {ratio['rnn']:.3f} (< 1); ordering RNN <= GRU <= LSTM in skill "
                  f"{'holds' if ordered else 'does not hold'} (reported only)")
    assert ok


def test_10_metric_fidelity():
    rng = np.random.default_rng(1010)
    worst = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 30)), int(rng.integers(1, 4)))
        t = rng.uniform(0, 1, size=shape)
        p = t + rng.normal(0, 0.2, size=shape)
        v_max = float(t.max()) + 0.1
        mu = float(rng.uniform(0, 1))
        mae, rmse = mae_rmse(p, t)
        got = (mae, rmse, psnr(p, t, v_max), ssim(p, t), ssim(p, t, mu_v=mu))
        ref = (t_mae(flat(p), flat(t)), t_mse(flat(p), flat(t)) ** 0.5, t_psnr(flat(p), flat(t), v_max),
               t_ssim(flat(p), flat(t)), t_ssim(flat(p), flat(t), mu))
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    spot = psnr(np.ones(4), np.zeros(4), 2.0)
    spot_err = abs(spot - 20 * np.log10(2.0))
    ok = worst <= 1e-12 and spot_err <= 1e-9 and abs(spot - 6.0206) < 1e-4
    record(10, ok, f"100 pairs, max |diff| {worst:.2e} (<= 1e-12); PSNR spot {spot:.6f}, err {spot_err:.1e}")
    assert ok


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "cloudlstm", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_11_determinism(tmp_path):
    data = tmp_path / "data"
    _cli("synth", "--points", 24, "--channels", 2, "--steps", 60, "--seed", 5, "--out", data)
    files = ["--positions", data / "positions.csv", "--values", data / "values.csv"]
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        _cli("train", *files, "--channels", 3, "--stacks", 2, "--k", 3, "--history", 3, "--horizon", 2,
             "--attention", "--epochs", 2, "--seed", 9, "--out", out)
        _cli("evaluate", "--model", out, *files, "--out", out / "report.csv")
        outputs.append([(out / name).read_bytes() for name in ("model.ckpt", "loss.csv", "report.csv", "report.txt")])
    same = [x == y for x, y in zip(*outputs)]
    ok = all(same)
    record(11, ok, f"checkpoint, loss log and metric reports bitwise identical across two runs: {same}")
    assert ok
