"""Timing suites for the two D-Conv stages: neighbour search and weighting."""
from __future__ import annotations

import csv
import gc
import time

import numpy as np

from .dconv import DConvWeights, dconv_weighting
from .pointcloud import kdtree_knn, knn_batch
from .tensor import Tensor

DEFAULT_SIZES = (256, 512, 1024, 2048, 4096)
FIELDS = ("suite", "n", "k", "h", "l", "seconds")


def _best_of(fn, repeats: int, inner: int) -> float:
    fn()  # warm caches and allocator before timing
    enabled = gc.isenabled()
    gc.disable()
    try:
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            best = min(best, (time.perf_counter() - t0) / inner)
    finally:
        if enabled:
            gc.enable()
    return best


def bench_dconv(sizes=DEFAULT_SIZES, k: int = 9, h: int = 1, l: int = 2, repeats: int = 7,
                inner: int = 5, seed: int = 0) -> list[dict]:
    """Time the weighting step alone (neighbour index precomputed)."""
    rng = np.random.default_rng(seed)
    f = h + l
    w = DConvWeights.init(1, k, f, 1, rng, requires_grad=False)
    rows = []
    for n in sizes:
        x = Tensor(rng.uniform(size=(1, n, f)))
        idx = knn_batch(x.data[..., h:], k)
        secs = _best_of(lambda: dconv_weighting(x, idx, w), repeats, inner)
        rows.append({"suite": "dconv", "n": n, "k": k, "h": h, "l": l, "seconds": secs})
    return rows


def bench_knn(sizes=DEFAULT_SIZES, k: int = 9, l: int = 2, repeats: int = 5, inner: int = 3,
              seed: int = 0) -> list[dict]:
    """Time KD-tree construction plus one query per point."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        pts = rng.uniform(size=(n, l))
        secs = _best_of(lambda: kdtree_knn(pts, k), repeats, inner)
        rows.append({"suite": "knn", "n": n, "k": k, "h": 0, "l": l, "seconds": secs})
    return rows


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line ``y = a x + b``; returns ``(a, b, r_squared)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def loglog_exponent(x, y) -> float:
    slope, _, _ = linear_fit(np.log(x), np.log(y))
    return slope


def summarize(rows: list[dict]) -> dict:
    n = [r["n"] for r in rows]
    s = [r["seconds"] for r in rows]
    _, _, r2 = linear_fit(n, s)
    return {"r_squared": r2, "loglog_exponent": loglog_exponent(n, s)}


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "seconds": repr(float(r["seconds"]))})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"suite": r["suite"], "n": int(r["n"]), "k": int(r["k"]), "h": int(r["h"]),
             "l": int(r["l"]), "seconds": float(r["seconds"])}
            for r in csv.DictReader(fh)
        ]
