"""CloudLSTM, CloudGRU and CloudRNN cells over point-cloud shaped states.

All tensors are ``(..., U, N, H + L)``. The input-path and state-path
D-Convs of a gate (``W_s * x + W_h * h``) are computed as a single D-Conv
over the channel-wise concatenation ``[x; h]``: each channel picks its own
neighbours anyway, so the sum over input channels splits exactly into the
two terms. All gates of a cell share that one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import intactness
from . import tensor as T
from .dconv import DConvWeights, coord_sigmoid, dconv
from .pointcloud import PointCloudFrame
from .tensor import DimensionError, Tensor

CELL_KINDS = ("lstm", "gru", "rnn")


@dataclass
class RecurrentState:
    hidden: Tensor
    cell: Tensor | None = None

    def __post_init__(self):
        if self.cell is not None and self.cell.shape != self.hidden.shape:
            raise DimensionError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    def frame(self, n_values: int) -> PointCloudFrame:
        return PointCloudFrame.from_features(self.hidden, n_values)


@dataclass
class CellWeights:
    """Weights of one recurrent cell.

    ``gates`` maps ``[x; h]`` to the stacked sigmoid-gate pre-activations
    (LSTM: input, forget, output, candidate; GRU: update, reset). ``cand``
    is the GRU/RNN candidate D-Conv. Channel layout of every D-Conv input is
    ``u_in`` input channels followed by ``hidden`` state channels.
    """

    kind: str
    u_in: int
    hidden: int
    n_values: int
    gates: DConvWeights | None = None
    cand: DConvWeights | None = None

    @classmethod
    def init(cls, kind, u_in, hidden, k, n_values, n_features, rng) -> "CellWeights":
        if kind not in CELL_KINDS:
            raise ValueError(f"cell kind must be one of {CELL_KINDS}, got {kind!r}")
        cw = cls(kind, u_in, hidden, n_values)
        c_in = u_in + hidden
        if kind == "lstm":
            cw.gates = DConvWeights.init(c_in, k, n_features, 4 * hidden, rng)
        elif kind == "gru":
            cw.gates = DConvWeights.init(c_in, k, n_features, 2 * hidden, rng)
            cw.cand = DConvWeights.init(c_in, k, n_features, hidden, rng)
        else:
            cw.cand = DConvWeights.init(c_in, k, n_features, hidden, rng)
        return cw

    def named(self) -> dict[str, DConvWeights]:
        out = {}
        if self.gates is not None:
            out["gates"] = self.gates
        if self.cand is not None:
            out["cand"] = self.cand
        return out

    def parameters(self) -> list[Tensor]:
        return [p for d in self.named().values() for p in d.parameters()]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(W_s, W_h, b)`` arrays of one named gate, for inspection and tests."""
        slots = {
            "lstm": {"i": ("gates", 0), "f": ("gates", 1), "o": ("gates", 2), "c": ("gates", 3)},
            "gru": {"z": ("gates", 0), "r": ("gates", 1), "h": ("cand", 0)},
            "rnn": {"h": ("cand", 0)},
        }[self.kind]
        src, pos = slots[name]
        d = self.named()[src]
        sl = slice(pos * self.hidden, (pos + 1) * self.hidden)
        w = d.w.data[..., sl]
        return w[: self.u_in], w[self.u_in :], d.b.data[sl]


def init_state(template, hidden_channels: int, n_values: int | None = None, with_cell: bool = True) -> RecurrentState:
    """Zero values; coordinates copied from the template's first channel.

    ``template`` is a frame, or a ``(..., U, N, H + L)`` tensor/array together
    with ``n_values`` = H.
    """
    if isinstance(template, PointCloudFrame):
        return init_state_from(template.features(), hidden_channels, template.H, with_cell)
    if n_values is None:
        raise ValueError("n_values is required when the template is not a frame")
    return init_state_from(template, hidden_channels, n_values, with_cell)


def init_state_from(feats, hidden_channels: int, n_values: int, with_cell: bool = True) -> RecurrentState:
    data = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
    base = data[..., :1, :, :].copy()
    base[..., :n_values] = 0.0
    rep = np.repeat(base, hidden_channels, axis=-3)
    cell = Tensor(rep.copy()) if with_cell else None
    return RecurrentState(Tensor(rep), cell)


def _check_state(x: Tensor, state: RecurrentState, w: CellWeights) -> None:
    if x.shape[:-3] != state.hidden.shape[:-3] or x.shape[-2:] != state.hidden.shape[-2:]:
        raise DimensionError(f"input {x.shape} and state {state.hidden.shape} disagree on N/features")
    if x.shape[-3] != w.u_in or state.hidden.shape[-3] != w.hidden:
        raise DimensionError(
            f"channels: input {x.shape[-3]} / state {state.hidden.shape[-3]}, "
            f"weights expect {w.u_in} / {w.hidden}"
        )


def _chan(t: Tensor, start: int, stop: int) -> Tensor:
    return t[..., start:stop, :, :]


def cloudlstm_step(x: Tensor, state: RecurrentState, w: CellWeights) -> RecurrentState:
    _check_state(x, state, w)
    if state.cell is None:
        raise DimensionError("CloudLSTM needs a memory cell in its state")
    hc, nv = w.hidden, w.n_values
    z = dconv(T.concat([x, state.hidden], axis=-3), w.gates, nv, coord_sigmoid_on=False)
    i = T.sigmoid(_chan(z, 0, hc))
    f = T.sigmoid(_chan(z, hc, 2 * hc))
    o = T.sigmoid(_chan(z, 2 * hc, 3 * hc))
    g = T.tanh(coord_sigmoid(_chan(z, 3 * hc, 4 * hc), nv))
    c = f * state.cell + i * g
    h = o * T.tanh(c)
    return RecurrentState(h, c)


def cloudgru_step(x: Tensor, state: RecurrentState, w: CellWeights) -> RecurrentState:
    _check_state(x, state, w)
    hc, nv = w.hidden, w.n_values
    h_prev = state.hidden
    z = dconv(T.concat([x, h_prev], axis=-3), w.gates, nv, coord_sigmoid_on=False)
    upd = T.sigmoid(_chan(z, 0, hc))
    rst = T.sigmoid(_chan(z, hc, 2 * hc))
    cand = T.tanh(dconv(T.concat([x, rst * h_prev], axis=-3), w.cand, nv))
    ones = Tensor(np.ones(upd.shape))
    h = upd * h_prev + (ones - upd) * cand
    return RecurrentState(h, None)


def cloudrnn_step(x: Tensor, state: RecurrentState, w: CellWeights) -> RecurrentState:
    _check_state(x, state, w)
    h = T.tanh(dconv(T.concat([x, state.hidden], axis=-3), w.cand, w.n_values))
    return RecurrentState(h, None)


STEP = {"lstm": cloudlstm_step, "gru": cloudgru_step, "rnn": cloudrnn_step}


def cell_step(x: Tensor, state: RecurrentState, w: CellWeights) -> RecurrentState:
    new = STEP[w.kind](x, state, w)
    intactness.check(x.shape[-2], new.hidden.shape[-2], "cell_step")
    return new
