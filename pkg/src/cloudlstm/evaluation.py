"""Forecast metrics (MAE, RMSE, PSNR, SSIM) and the copy-last baseline.

Each metric scores one predicted frame against its ground truth over all
points and value features. :func:`evaluate` aggregates them into mean and
standard deviation across evaluation instances.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

K1 = 0.1
K2 = 0.3
DYNAMIC_RANGE = 2.0
C1 = (K1 * DYNAMIC_RANGE) ** 2
C2 = (K2 * DYNAMIC_RANGE) ** 2
PSNR_CAP = 300.0


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return pred, truth


def mae_rmse(pred, truth) -> tuple[float, float]:
    pred, truth = _pair(pred, truth)
    err = pred - truth
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def psnr(pred, truth, v_max: float) -> float:
    """``20 log10 v_max - 10 log10 MSE``, capped at 300 dB for exact matches."""
    pred, truth = _pair(pred, truth)
    err = pred - truth
    mse = float(np.mean(err * err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(v_max) - 10.0 * math.log10(mse))


def ssim(pred, truth, mu_v: float | None = None) -> float:
    """Single-window structural similarity in the non-standard product form.

    Numerator ``(2 p mu + c1)(2 cov + c2)``, denominator
    ``(p^2 mu^2 + c1)(var_t var_p + c2)``, where ``p`` is the mean
    prediction over the frame, ``mu`` the reference mean (the truth frame's
    mean unless ``mu_v`` is supplied), and variances/covariance are
    population moments over all points and features.
    """
    pred, truth = _pair(pred, truth)
    p = pred.mean()
    mu = truth.mean() if mu_v is None else float(mu_v)
    var_p = pred.var()
    var_t = truth.var()
    cov = np.mean((pred - p) * (truth - truth.mean()))
    num = (2.0 * p * mu + C1) * (2.0 * cov + C2)
    den = (p * p * mu * mu + C1) * (var_t * var_p + C2)
    return float(num / den)


def copy_last_baseline(history, horizon: int) -> np.ndarray:
    """Repeat the last history frame ``horizon`` times along a new leading axis.

    ``history`` is (..., M, U, N, F); the result is (..., J, U, N, F).
    """
    history = np.asarray(history, dtype=np.float64)
    if history.shape[-4] < 1:
        raise ValueError("history must contain at least one frame")
    last = history[..., -1:, :, :, :]
    reps = [1] * history.ndim
    reps[-4] = horizon
    return np.tile(last, reps)


@dataclass
class MetricReport:
    """Per-step and aggregate mean/std of each metric across instances."""

    name: str
    per_step: dict[str, np.ndarray] = field(default_factory=dict)  # metric -> (J, 2)
    aggregate: dict[str, tuple[float, float]] = field(default_factory=dict)
    raw: dict[str, np.ndarray] = field(default_factory=dict)  # metric -> (S, J)

    METRICS = ("MAE", "RMSE", "PSNR", "SSIM")


def evaluate(pred, truth, n_values: int, name: str = "model", v_max: float | None = None,
             mu_v: float | None = None) -> MetricReport:
    """Score forecasts ``pred`` against ``truth``, both (S, J, U, N, F).

    ``v_max`` defaults to the maximum ground-truth value in the set. SSIM
    uses each truth frame's own mean unless ``mu_v`` is given.
    """
    pred, truth = _pair(pred, truth)
    pv = pred[..., :n_values]
    tv = truth[..., :n_values]
    s, j = pv.shape[:2]
    if v_max is None:
        v_max = float(tv.max())
    raw = {m: np.empty((s, j)) for m in MetricReport.METRICS}
    for a in range(s):
        for b in range(j):
            mae, rmse = mae_rmse(pv[a, b], tv[a, b])
            raw["MAE"][a, b] = mae
            raw["RMSE"][a, b] = rmse
            raw["PSNR"][a, b] = psnr(pv[a, b], tv[a, b], v_max)
            raw["SSIM"][a, b] = ssim(pv[a, b], tv[a, b], mu_v)
    rep = MetricReport(name, raw=raw)
    for m, arr in raw.items():
        rep.per_step[m] = np.stack([arr.mean(axis=0), arr.std(axis=0)], axis=1)
        rep.aggregate[m] = (float(arr.mean()), float(arr.std()))
    return rep


def per_channel_mae(pred, truth, n_values: int) -> np.ndarray:
    """Mean absolute error per channel, (U,)."""
    pred, truth = _pair(pred, truth)
    err = np.abs(pred[..., :n_values] - truth[..., :n_values])
    return err.mean(axis=tuple(i for i in range(err.ndim) if i != err.ndim - 3))


def write_report_csv(path, reports: list[MetricReport], channel_mae: dict[str, np.ndarray] | None = None) -> None:
    """Rows ``model,step,<metric>_mean,<metric>_std,...``; step ``all`` is the aggregate."""
    header = ["model", "step"]
    for m in MetricReport.METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    n_ch = 0
    if channel_mae:
        n_ch = len(next(iter(channel_mae.values())))
        header += [f"MAE_ch{c}" for c in range(n_ch)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rep in reports:
            j = len(next(iter(rep.per_step.values())))
            for step in range(j):
                row = [rep.name, step + 1]
                for m in MetricReport.METRICS:
                    row += [repr(float(v)) for v in rep.per_step[m][step]]
                row += [""] * n_ch
                w.writerow(row)
            row = [rep.name, "all"]
            for m in MetricReport.METRICS:
                row += [repr(float(v)) for v in rep.aggregate[m]]
            if channel_mae:
                row += [repr(float(v)) for v in channel_mae.get(rep.name, [float("nan")] * n_ch)]
            w.writerow(row)


def format_table(reports: list[MetricReport]) -> str:
    """Aligned plain-text table of aggregate ``mean±std`` values."""
    rows = [["Model"] + list(MetricReport.METRICS)]
    for rep in reports:
        rows.append([rep.name] + [f"{mu:.4f}±{sd:.4f}" for mu, sd in (rep.aggregate[m] for m in MetricReport.METRICS)])
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
