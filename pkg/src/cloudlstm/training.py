"""MSE loss, Adam, chronological splitting and the fit loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    teacher_forcing: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def mse_loss(pred, truth, n_values: int | None = None) -> Tensor:
    """Mean squared error over value features.

    With ``n_values`` given, only the first ``n_values`` entries of the last
    axis are compared; otherwise the whole tensors are.
    """
    pred = T.as_tensor(pred)
    truth = T.as_tensor(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"mse_loss: {pred.shape} vs {truth.shape}")
    if n_values is not None:
        pred = pred[..., :n_values]
        truth = truth[..., :n_values]
    return T.mean(T.square(pred - truth))


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
                state: OptimizerState, config: TrainConfig) -> tuple[list[np.ndarray], OptimizerState]:
    """One bias-corrected Adam step; returns new parameter arrays and state."""
    if any(g is None for g in grads):
        missing = [i for i, g in enumerate(grads) if g is None]
        raise TrainingError(f"missing gradient for parameter(s) {missing}")
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p.append(p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimizerState(new_m, new_v, step)


def split_dataset(windows, ratio: float = 0.8):
    """Chronological split into (train + validation, test) at ``ratio``."""
    n = len(windows)
    if n < 2:
        raise ValueError(f"need at least two windows to split, got {n}")
    cut = int(math.floor(ratio * n + 1e-9))
    cut = min(max(cut, 1), n - 1)
    return windows[:cut], windows[cut:]


@dataclass
class FitResult:
    loss_log: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def final_train_mse(self) -> float:
        return self.loss_log[-1][1] if self.loss_log else float("nan")


def evaluate_loss(model, history: np.ndarray, target: np.ndarray, batch_size: int = 16) -> float:
    """Value-feature MSE of ``model`` over a set of windows, without gradients."""
    total, count = 0.0, 0
    for s in range(0, len(history), batch_size):
        pred = model.forecast(history[s:s + batch_size])
        diff = pred[..., :model.n_values] - target[s:s + batch_size, ..., :model.n_values]
        total += float((diff * diff).sum())
        count += diff.size
    return total / count


def fit(model, train, config: TrainConfig, val=None,
        on_epoch: Callable[[int, float, float], bool] | None = None) -> FitResult:
    """Train ``model`` in place on ``train`` windows.

    ``train``/``val`` expose ``history`` (S, M, U, N, F) and ``target``
    (S, J, U, N, F) arrays. Each epoch visits the windows in a seeded random
    order; the per-epoch train MSE is the mean of the batch losses.
    ``on_epoch`` may return True to stop after that epoch.
    """
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = OptimizerState.for_params([p.data for p in params])
    result = FitResult()
    hist, targ = np.asarray(train.history), np.asarray(train.target)
    n = len(hist)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses, weights = [], []
        for s in range(0, n, config.batch_size):
            idx = np.sort(order[s:s + config.batch_size])
            model.zero_grad()
            pred = model.forward(Tensor(hist[idx]), Tensor(targ[idx]), config.teacher_forcing)
            loss = mse_loss(pred, Tensor(targ[idx]), model.n_values)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            grads = [p.grad for p in params]
            new, state = adam_update([p.data for p in params], grads, state, config)
            for p, arr in zip(params, new):
                p.data = arr
            losses.append(value)
            weights.append(len(idx))
        train_mse = float(np.average(losses, weights=weights)) if losses else float("nan")
        val_mse = evaluate_loss(model, val.history, val.target) if val is not None and len(val) else float("nan")
        result.loss_log.append((epoch, train_mse, val_mse))
        log.info("epoch %d train_mse %.6g val_mse %.6g", epoch, train_mse, val_mse)
        if on_epoch is not None and on_epoch(epoch, train_mse, val_mse):
            break
    model.zero_grad()
    return result


def write_loss_log(path, loss_log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in loss_log:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
