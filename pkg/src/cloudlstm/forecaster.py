"""Seq2seq point-cloud forecaster: D-Conv embedding, stacked recurrent
encoder and decoder, optional soft attention, D-Conv de-embedding.

Tensors carry a leading batch axis throughout: histories are
``(B, M, U, N, H + L)`` and forecasts ``(B, J, U, N, H + L)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import intactness
from . import tensor as T
from .dconv import DConvConfig, DConvWeights, dconv, dconv_apply
from .pointcloud import PointCloudFrame
from .recurrent import CELL_KINDS, CellWeights, RecurrentState, cell_step, init_state_from
from .tensor import DimensionError, Tensor

CHECKPOINT_MAGIC = b"CLOUDCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ForecasterConfig:
    stacks: int = 2
    hidden_channels: int = 36
    k_neighbors: int = 9
    history: int = 6
    horizon: int = 6
    cell: str = "lstm"
    attention: bool = False
    emit_coordinates: bool = False

    def __post_init__(self):
        if self.stacks < 1:
            raise ValueError("stacks must be >= 1")
        if self.history < 1 or self.horizon < 1:
            raise ValueError("history and horizon must be >= 1")
        if self.hidden_channels < 1 or self.k_neighbors < 1:
            raise ValueError("hidden_channels and k_neighbors must be >= 1")
        if self.cell not in CELL_KINDS:
            raise ValueError(f"cell must be one of {CELL_KINDS}, got {self.cell!r}")


@dataclass
class AttentionWeights:
    """``score`` is the pointwise D-Conv applied to ``[H_en; H_de]``; ``v`` is (hidden, H + L)."""

    score: DConvWeights
    v: Tensor
    proj: DConvWeights

    def parameters(self) -> list[Tensor]:
        return self.score.parameters() + [self.v] + self.proj.parameters()


@dataclass
class Encoded:
    states: list[list[RecurrentState]]  # [step][stack]
    final: list[RecurrentState]

    @property
    def top(self) -> list[Tensor]:
        return [step[-1].hidden for step in self.states]


@dataclass
class CloudForecaster:
    config: ForecasterConfig
    channels: int
    n_values: int
    n_coords: int
    embed: DConvWeights = None
    encoder: list[CellWeights] = field(default_factory=list)
    decoder: list[CellWeights] = field(default_factory=list)
    attention: AttentionWeights | None = None
    deembed: DConvWeights = None

    @property
    def n_features(self) -> int:
        return self.n_values + self.n_coords

    @classmethod
    def init(cls, config: ForecasterConfig, channels: int, n_values: int, n_coords: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        f = n_values + n_coords
        hc, k = config.hidden_channels, config.k_neighbors
        m = cls(config, channels, n_values, n_coords)
        m.embed = DConvWeights.init(channels, k, f, hc, rng)
        m.encoder = [CellWeights.init(config.cell, hc, hc, k, n_values, f, rng) for _ in range(config.stacks)]
        m.decoder = [CellWeights.init(config.cell, hc, hc, k, n_values, f, rng) for _ in range(config.stacks)]
        if config.attention:
            v = rng.uniform(-1.0, 1.0, size=(hc, f)) / np.sqrt(hc * f)
            m.attention = AttentionWeights(
                DConvWeights.init(2 * hc, 1, f, hc, rng),
                Tensor(v, requires_grad=True),
                DConvWeights.init(2 * hc, 1, f, hc, rng),
            )
        m.deembed = DConvWeights.init(hc, k, f, channels, rng)
        return m

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed.w": self.embed.w, "embed.b": self.embed.b}
        for side, cells in (("encoder", self.encoder), ("decoder", self.decoder)):
            for s, cw in enumerate(cells):
                for name, d in cw.named().items():
                    out[f"{side}.{s}.{name}.w"] = d.w
                    out[f"{side}.{s}.{name}.b"] = d.b
        if self.attention is not None:
            a = self.attention
            out.update({
                "attention.score.w": a.score.w, "attention.score.b": a.score.b,
                "attention.v": a.v,
                "attention.proj.w": a.proj.w, "attention.proj.b": a.proj.b,
            })
        out["deembed.w"] = self.deembed.w
        out["deembed.b"] = self.deembed.b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def embed_frame(self, x: Tensor) -> Tensor:
        return dconv(x, self.embed, self.n_values)

    def deembed_frame(self, h: Tensor) -> Tensor:
        return dconv(h, self.deembed, self.n_values)

    def encode(self, history: Tensor) -> Encoded:
        """Run the encoder stacks over ``history`` of shape (B, M, U, N, F)."""
        _check_history(history, self)
        hc = self.config.hidden_channels
        lstm = self.config.cell == "lstm"
        first = history[:, 0]
        states = [init_state_from(first, hc, self.n_values, with_cell=lstm) for _ in self.encoder]
        per_step = []
        for t in range(history.shape[1]):
            inp = self.embed_frame(history[:, t])
            new = []
            for cw, st in zip(self.encoder, states):
                st = cell_step(inp, st, cw)
                new.append(st)
                inp = st.hidden
            states = new
            per_step.append(new)
        return Encoded(per_step, states)

    def attention_context(self, encoder_states: list[Tensor], decoder_state: Tensor):
        return attention_context(encoder_states, decoder_state, self.attention, self.n_values)

    def decode(self, encoded: Encoded, history: Tensor, target: Tensor | None = None,
               teacher_forcing: bool = False) -> Tensor:
        """Autoregressive rollout of ``horizon`` steps; returns (B, J, U, N, F)."""
        nv = self.n_values
        last = history[:, history.shape[1] - 1]
        static_coords = last[..., nv:]
        states = list(encoded.final)
        enc_top = encoded.top if self.attention is not None else None
        inp = last
        outs = []
        for j in range(self.config.horizon):
            h = self.embed_frame(inp)
            new = []
            for cw, st in zip(self.decoder, states):
                st = cell_step(h, st, cw)
                new.append(st)
                h = st.hidden
            states = new
            if self.attention is not None:
                ctx, _ = attention_context(enc_top, h, self.attention, nv)
                h = dconv(T.concat([h, ctx], axis=-3), self.attention.proj, nv)
            y = self.deembed_frame(h)
            if not self.config.emit_coordinates:
                y = T.concat([y[..., :nv], static_coords], axis=-1)
            outs.append(y)
            if teacher_forcing and target is not None:
                inp = target[:, j]
            else:
                inp = y
        b = outs[0].shape[0]
        stacked = T.concat([o.reshape((b, 1) + o.shape[1:]) for o in outs], axis=1)
        return stacked

    def forward(self, history, target=None, teacher_forcing: bool = False) -> Tensor:
        history = T.as_tensor(history)
        target = None if target is None else T.as_tensor(target)
        out = self.decode(self.encode(history), history, target, teacher_forcing)
        intactness.check(history.shape[-2], out.shape[-2], "forecast")
        return out

    def forecast(self, history: np.ndarray) -> np.ndarray:
        """Forecast without recording gradients. Accepts (M, U, N, F) or (B, M, U, N, F)."""
        history = np.asarray(history, dtype=np.float64)
        single = history.ndim == 4
        if single:
            history = history[None]
        out = self.forward(Tensor(history)).data
        return out[0] if single else out

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "forecaster": asdict(self.config),
            "channels": self.channels,
            "n_values": self.n_values,
            "n_coords": self.n_coords,
        }
        save_checkpoint(path, meta, {k: v.data for k, v in self.named_parameters().items()})

    @classmethod
    def load(cls, path) -> "CloudForecaster":
        meta, tensors = load_checkpoint(path)
        cfg = ForecasterConfig(**meta["forecaster"])
        m = cls.init(cfg, meta["channels"], meta["n_values"], meta["n_coords"])
        params = m.named_parameters()
        if set(params) != set(tensors):
            missing = sorted(set(params) ^ set(tensors))
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing}")
        for name, p in params.items():
            if p.shape != tensors[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {tensors[name].shape} != {p.shape}")
            p.data = tensors[name].copy()
        return m


def _check_history(history: Tensor, model: CloudForecaster) -> None:
    if history.ndim != 5:
        raise DimensionError(f"history must be (B, M, U, N, F), got {history.shape}")
    if history.shape[2] != model.channels or history.shape[4] != model.n_features:
        raise DimensionError(
            f"history {history.shape} does not match model channels={model.channels}, "
            f"features={model.n_features}"
        )
    if history.shape[1] < 1:
        raise DimensionError("history needs at least one frame")
    if model.config.k_neighbors > history.shape[3]:
        raise DimensionError(f"K={model.config.k_neighbors} exceeds N={history.shape[3]}")


def attention_context(encoder_states: list[Tensor], decoder_state: Tensor,
                      weights: AttentionWeights, n_values: int) -> tuple[Tensor, Tensor]:
    """Soft attention over encoder hidden states.

    Each score is ``v . tanh(W_a * [H_en_j; H_de])`` summed over channels
    and features and averaged over points; scores are softmax-normalised
    across encoder steps. Returns ``(context, weights)`` with context shaped
    like ``decoder_state`` and weights ``(..., M)``.
    """
    if not encoder_states:
        raise DimensionError("attention needs at least one encoder state")
    hc = decoder_state.shape[-3]
    for e in encoder_states:
        if e.shape != decoder_state.shape:
            raise DimensionError(f"encoder state {e.shape} vs decoder state {decoder_state.shape}")
    if weights.score.u_in != 2 * hc or weights.v.shape != (weights.score.u_out,) + decoder_state.shape[-1:]:
        raise DimensionError("attention weights do not match the hidden channel count")
    lead = decoder_state.shape[:-3]
    tail = decoder_state.shape[-3:]
    m = len(encoder_states)
    nl = len(lead)
    enc = T.concat([e.reshape(lead + (1,) + tail) for e in encoder_states], axis=nl)
    dec = T.broadcast_to(decoder_state.reshape(lead + (1,) + tail), enc.shape)
    scores = T.tanh(dconv(T.concat([enc, dec], axis=-3), weights.score, n_values, coord_sigmoid_on=False))
    proj = scores * T.broadcast_to(weights.v.reshape(weights.v.shape[0], 1, weights.v.shape[1]), scores.shape)
    n_pts = tail[1]
    e = T.scale(proj.sum(axis=(-3, -2, -1)), 1.0 / n_pts)  # (..., M)
    a = T.softmax(e, axis=-1)
    a_full = T.broadcast_to(a.reshape(lead + (m, 1, 1, 1)), enc.shape)
    ctx = (a_full * enc).sum(axis=nl)
    return ctx, a


def embed(frame: PointCloudFrame, weights: DConvWeights) -> PointCloudFrame:
    """One full D-Conv lifting a frame's channels to ``weights.u_out``."""
    return dconv_apply(frame, weights, DConvConfig(weights.k))


def encode(history, model: CloudForecaster) -> Encoded:
    """Encoder pass over a ``(B, M, U, N, F)`` history."""
    return model.encode(T.as_tensor(history))


def decode_forecast(encoded: Encoded, history, model: CloudForecaster) -> np.ndarray:
    """Autoregressive rollout after :func:`encode`; returns ``(B, J, U, N, F)``."""
    history = T.as_tensor(history)
    out = model.decode(encoded, history)
    intactness.check(history.shape[-2], out.shape[-2], "forecast")
    return out.data


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``magic | version | json meta | named float64 tensors``, little-endian."""
    body = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return meta, tensors
