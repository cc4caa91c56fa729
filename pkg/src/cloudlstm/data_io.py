"""Stream datasets: CSV ingestion, synthetic generation and windowing.

On disk a stream is two files::

    positions.csv   station_id,x,y
    values.csv      timestamp,station_id,<channel_1>,...,<channel_U>

Rows of ``values.csv`` are grouped by timestamp and every timestamp lists
every station once.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloudFrame, normalize_coords


class DataError(ValueError):
    pass


@dataclass
class StreamDataset:
    """Time-ordered frames over a fixed set of stations.

    ``values`` is (T, U, N, H) with H = 1 for the CSV format; ``positions``
    holds raw station positions (N, L) and ``coords`` their normalised form.
    """

    values: np.ndarray
    positions: np.ndarray
    station_ids: list[str]
    channel_names: list[str]
    timestamps: np.ndarray
    interval: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        t, u, n, _ = self.values.shape
        if self.positions.shape[0] != n or len(self.station_ids) != n:
            raise DataError("station count disagrees between positions and values")
        if len(self.channel_names) != u:
            raise DataError("channel count disagrees with channel names")
        if len(self.timestamps) != t:
            raise DataError("timestamp count disagrees with frame count")
        if t > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def U(self) -> int:
        return self.values.shape[1]

    @property
    def N(self) -> int:
        return self.values.shape[2]

    @property
    def H(self) -> int:
        return self.values.shape[3]

    @property
    def L(self) -> int:
        return self.positions.shape[1]

    @property
    def coords(self) -> np.ndarray:
        """Normalised coordinates replicated per channel, (U, N, L)."""
        norm = normalize_coords(self.positions)
        return np.broadcast_to(norm, (self.U,) + norm.shape).copy()

    def features(self) -> np.ndarray:
        """(T, U, N, H + L) feature array with static normalised coordinates."""
        c = np.broadcast_to(self.coords, (self.T,) + self.coords.shape)
        return np.concatenate([self.values, c], axis=-1)

    def frame(self, t: int) -> PointCloudFrame:
        return PointCloudFrame(self.values[t], self.coords, int(self.timestamps[t]))

    def frames(self) -> list[PointCloudFrame]:
        return [self.frame(t) for t in range(self.T)]


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse {text!r} as a number") from None


def load_stream(positions_path, values_path, fill_gaps: bool = False) -> StreamDataset:
    """Read the two-file CSV format.

    Empty or ``nan`` cells are rejected unless ``fill_gaps`` is set, in which
    case each station/channel series is linearly interpolated in time
    (edges take the nearest observed value).
    """
    positions_path, values_path = Path(positions_path), Path(values_path)
    with open(positions_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0][:1]] != ["station_id"] or len(rows[0]) < 2:
        raise DataError(f"{positions_path}: header must be 'station_id,x,y'")
    station_ids, pos = [], []
    seen = set()
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(rows[0]):
            raise DataError(f"{positions_path}:{ln}: expected {len(rows[0])} fields, got {len(row)}")
        sid = row[0]
        if sid in seen:
            raise DataError(f"{positions_path}:{ln}: duplicate station id {sid!r}")
        seen.add(sid)
        station_ids.append(sid)
        pos.append([_parse_float(c, f"{positions_path}:{ln}") for c in row[1:]])
    if not station_ids:
        raise DataError(f"{positions_path}: no stations")
    slot = {sid: i for i, sid in enumerate(station_ids)}
    n = len(station_ids)

    with open(values_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["timestamp", "station_id"] or len(rows[0]) < 3:
        raise DataError(f"{values_path}: header must be 'timestamp,station_id,<channels...>'")
    channels = rows[0][2:]
    u = len(channels)
    times: list[int] = []
    frames: list[np.ndarray] = []
    filled: list[np.ndarray] = []
    current = None
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != u + 2:
            raise DataError(f"{values_path}:{ln}: expected {u + 2} fields, got {len(row)} (ragged channels)")
        try:
            ts = int(row[0])
        except ValueError:
            raise DataError(f"{values_path}:{ln}: timestamp {row[0]!r} is not an integer") from None
        sid = row[1]
        if sid not in slot:
            raise DataError(f"{values_path}:{ln}: unknown station id {sid!r}")
        if current is None or ts != current:
            if times and ts <= times[-1]:
                raise DataError(f"{values_path}:{ln}: timestamp {ts} is not after {times[-1]}")
            times.append(ts)
            frames.append(np.full((u, n), np.nan))
            filled.append(np.zeros(n, dtype=bool))
            current = ts
        i = slot[sid]
        if filled[-1][i]:
            raise DataError(f"{values_path}:{ln}: duplicate row for station {sid!r} at timestamp {ts}")
        filled[-1][i] = True
        for c, cell in enumerate(row[2:]):
            cell = cell.strip()
            frames[-1][c, i] = np.nan if cell == "" else _parse_float(cell, f"{values_path}:{ln}")
    if not times:
        raise DataError(f"{values_path}: no data rows")
    for t, mask in zip(times, filled):
        if not mask.all():
            missing = [station_ids[i] for i in np.flatnonzero(~mask)]
            raise DataError(f"{values_path}: timestamp {t} lacks stations {missing[:5]}")
    values = np.stack(frames)  # (T, U, N)
    if np.isinf(values).any():
        raise DataError(f"{values_path}: infinite values")
    if np.isnan(values).any():
        if not fill_gaps:
            t, c, i = np.argwhere(np.isnan(values))[0]
            raise DataError(
                f"{values_path}: missing value at timestamp {times[t]}, station {station_ids[i]!r}, "
                f"channel {channels[c]!r} (use gap filling to interpolate)"
            )
        values = _fill_linear(values, np.asarray(times, dtype=np.float64))
    interval = int(np.min(np.diff(times))) if len(times) > 1 else 1
    return StreamDataset(values[..., None], np.asarray(pos), station_ids, channels, np.asarray(times), interval)


def _fill_linear(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    out = values.copy()
    flat = out.reshape(len(times), -1)
    for col in range(flat.shape[1]):
        series = flat[:, col]
        ok = ~np.isnan(series)
        if not ok.any():
            raise DataError("a station/channel series has no observed values to interpolate from")
        if not ok.all():
            series[~ok] = np.interp(times[~ok], times[ok], series[ok])
    return out


def save_stream(dataset: StreamDataset, positions_path, values_path) -> None:
    if dataset.H != 1:
        raise DataError("the CSV format carries exactly one value feature per channel")
    if dataset.L != 2:
        raise DataError("the CSV format carries exactly two coordinates (x, y)")
    with open(positions_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "x", "y"])
        for sid, p in zip(dataset.station_ids, dataset.positions):
            w.writerow([sid] + [repr(float(c)) for c in p])
    write_values(values_path, dataset.timestamps, dataset.station_ids, dataset.channel_names,
                 dataset.values[..., 0])


def write_values(path, timestamps, station_ids, channel_names, values) -> None:
    """Write (T, U, N) values in the long ``values.csv`` layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "station_id"] + list(channel_names))
        for t, ts in enumerate(timestamps):
            for i, sid in enumerate(station_ids):
                w.writerow([int(ts), sid] + [repr(float(values[t, c, i])) for c in range(len(channel_names))])


def fingerprint(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def synth_diffusion(n_points: int, channels: int, steps: int, seed: int = 0, *,
                    noise: float = 0.01, stationary: bool = False, n_bumps: int = 3,
                    period: float = 24.0, width: float = 0.15) -> StreamDataset:
    """Drifting Gaussian bumps over points scattered in the unit square.

    Each bump circles a fixed centre once per ``period`` steps; channel ``u``
    sees the same bumps shifted in phase by ``2 pi u / channels``. Seeded
    Gaussian noise of std ``noise`` is added. ``stationary`` freezes the
    bumps in place.
    """
    if n_points < 4:
        raise ValueError("synth_diffusion needs at least 4 points")
    if channels < 1 or steps < 1:
        raise ValueError("channels and steps must be positive")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, 1.0, size=(n_points, 2))
    centres = rng.uniform(0.3, 0.7, size=(n_bumps, 2))
    radii = rng.uniform(0.15, 0.3, size=n_bumps)
    amps = rng.uniform(0.5, 1.0, size=n_bumps)
    offsets = rng.uniform(0.0, 2 * math.pi, size=n_bumps)
    direction = rng.choice([-1.0, 1.0], size=n_bumps)
    omega = 0.0 if stationary else 2 * math.pi / period
    t = np.arange(steps, dtype=np.float64)
    phase = 2 * math.pi * np.arange(channels) / channels
    # angle (T, U, B)
    ang = direction * omega * t[:, None, None] + phase[None, :, None] + offsets
    cx = centres[:, 0] + radii * np.cos(ang)
    cy = centres[:, 1] + radii * np.sin(ang)
    dx = pos[None, None, None, :, 0] - cx[..., None]
    dy = pos[None, None, None, :, 1] - cy[..., None]
    bumps = amps[:, None] * np.exp(-(dx * dx + dy * dy) / (2 * width * width))
    values = bumps.sum(axis=2)  # (T, U, N)
    if noise > 0:
        values = values + rng.normal(0.0, noise, size=values.shape)
    ids = [f"s{i:04d}" for i in range(n_points)]
    names = [f"ch{c}" for c in range(channels)]
    return StreamDataset(values[..., None], pos, ids, names, np.arange(steps), 1)


@dataclass
class WindowSet:
    """Sliding (history, target) windows; arrays are (S, M|J, U, N, H + L)."""

    history: np.ndarray
    target: np.ndarray
    starts: np.ndarray

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return WindowSet(self.history[key], self.target[key], self.starts[key])
        return self.history[key], self.target[key]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def window_count(steps: int, m: int, j: int, stride: int) -> int:
    return (steps - m - j) // stride + 1


def window_dataset(dataset: StreamDataset, m: int, j: int, stride: int = 1) -> WindowSet:
    if m < 1 or j < 1 or stride < 1:
        raise ValueError("M, J and stride must be positive")
    if dataset.T < m + j:
        raise DataError(f"stream has {dataset.T} steps, fewer than M + J = {m + j}")
    feats = dataset.features()
    starts = np.arange(window_count(dataset.T, m, j, stride)) * stride
    hist = np.stack([feats[s:s + m] for s in starts])
    targ = np.stack([feats[s + m:s + m + j] for s in starts])
    return WindowSet(hist, targ, starts)
