"""Point-cloud frames, coordinate normalisation and per-channel K-NN search."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .tensor import DimensionError, Tensor, _make

# Below this many points a vectorised all-pairs scan beats building a tree.
EXHAUSTIVE_MAX_N = 512
# Extra candidates requested from the tree so boundary ties can be resolved.
_TREE_SLACK = 8
# Up to this K, repeated argmin is cheaper than a partition.
_ARGMIN_MAX_K = 6


class CapacityError(ValueError):
    """Raised when more neighbours are requested than there are points."""


@dataclass
class PointCloudFrame:
    """One snapshot: ``values`` is (U, N, H), ``coords`` is (U, N, L)."""

    values: np.ndarray
    coords: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.values.ndim != 3 or self.coords.ndim != 3:
            raise DimensionError("values and coords must both be (U, N, features)")
        if self.values.shape[:2] != self.coords.shape[:2]:
            raise DimensionError(
                f"values {self.values.shape} and coords {self.coords.shape} disagree on (U, N)"
            )
        if min(self.values.shape) < 1 or self.coords.shape[2] < 1:
            raise DimensionError("U, N, H and L must all be at least 1")

    @property
    def U(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def H(self) -> int:
        return self.values.shape[2]

    @property
    def L(self) -> int:
        return self.coords.shape[2]

    def features(self) -> np.ndarray:
        """Values then coordinates, shape (U, N, H + L)."""
        return np.concatenate([self.values, self.coords], axis=-1)

    @classmethod
    def from_features(cls, feats, n_values: int, timestamp: int = 0) -> "PointCloudFrame":
        feats = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
        return cls(feats[..., :n_values].copy(), feats[..., n_values:].copy(), timestamp)

    def permute(self, perm) -> "PointCloudFrame":
        perm = np.asarray(perm)
        return PointCloudFrame(self.values[:, perm], self.coords[:, perm], self.timestamp)


@dataclass(frozen=True)
class NeighborIndex:
    """Per-channel ordered neighbour lists, shape (U, N, K); slot 0 is the anchor."""

    indices: np.ndarray

    @property
    def K(self) -> int:
        return self.indices.shape[-1]


def normalize_coords(raw) -> np.ndarray:
    """Min-max scale every coordinate dimension to [0, 1] across the points axis.

    Works on any array shaped ``(..., N, L)``. A dimension whose points all
    coincide maps to 0.5.
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=-2, keepdims=True)
    hi = raw.max(axis=-2, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (raw - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # accumulate per axis so every caller rounds identically
    shape = np.broadcast_shapes(a.shape, b.shape)[:-1]
    d = np.empty(shape)
    tmp = np.empty(shape)
    np.subtract(a[..., 0], b[..., 0], out=d)
    np.multiply(d, d, out=d)
    for l in range(1, a.shape[-1]):
        np.subtract(a[..., l], b[..., l], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        np.add(d, tmp, out=d)
    return d


def _pairwise_sq_dist(coords: np.ndarray) -> np.ndarray:
    """Same arithmetic as :func:`_sq_dist` on all pairs, laid out for speed."""
    axes = np.ascontiguousarray(np.moveaxis(coords, -1, 0))
    c = axes[0]
    d = np.subtract(c[..., :, None], c[..., None, :])
    np.multiply(d, d, out=d)
    tmp = np.empty_like(d)
    for c in axes[1:]:
        np.subtract(c[..., :, None], c[..., None, :], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        np.add(d, tmp, out=d)
    return d


def _check_k(n: int, k: int) -> None:
    if k < 1:
        raise CapacityError(f"K must be at least 1, got {k}")
    if k > n:
        raise CapacityError(f"K={k} exceeds the number of points N={n}")


def exhaustive_knn(coords, k: int) -> np.ndarray:
    """All-pairs scan over ``(..., N, L)`` coordinates.

    Neighbours are ordered by squared distance, ties going to the smaller
    index; the anchor always occupies slot 0.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[-2]
    _check_k(n, k)
    d2 = _pairwise_sq_dist(coords)
    diag = np.arange(n)
    d2[..., diag, diag] = -np.inf
    if k == n:
        return np.argsort(d2, axis=-1, kind="stable")
    if k <= _ARGMIN_MAX_K:
        # argmin returns the first minimum, which is exactly the index tie rule
        out = np.empty(coords.shape[:-1] + (k,), dtype=np.intp)
        out[..., 0] = diag
        d2[..., diag, diag] = np.inf
        for slot in range(1, k):
            best = d2.argmin(axis=-1)
            out[..., slot] = best
            np.put_along_axis(d2, best[..., None], np.inf, axis=-1)
        return out
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    pd = np.take_along_axis(d2, part, axis=-1)
    order = np.lexsort((part, pd), axis=-1)
    out = np.take_along_axis(part, order, axis=-1)
    # rows whose K-th distance is shared with unselected points: the partition
    # may have kept a larger index, so redo them with a stable full sort
    kth = np.take_along_axis(pd, order[..., -1:], axis=-1)
    tied = (d2 == kth).sum(axis=-1) != (pd == kth).sum(axis=-1)
    if tied.any():
        out[tied] = np.argsort(d2[tied], axis=-1, kind="stable")[..., :k]
    return out


def kdtree_knn(coords, k: int) -> np.ndarray:
    """K-NN for one ``(N, L)`` cloud through a KD-tree, same ordering as the scan."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    _check_k(n, k)
    m = min(n, k + _TREE_SLACK)
    _, cand = cKDTree(coords).query(coords, k=m)
    cand = np.asarray(cand, dtype=np.intp).reshape(n, m)
    d2 = _sq_dist(coords[cand], coords[:, None, :])
    rows = np.arange(n)
    d2[cand == rows[:, None]] = -np.inf
    # order candidates by (distance, index)
    order = np.lexsort((cand, d2), axis=-1)
    cand = np.take_along_axis(cand, order, axis=-1)
    d2 = np.take_along_axis(d2, order, axis=-1)
    out = cand[:, :k].copy()
    if m < n:
        # a tie reaching the end of the candidate list may hide equal-distance
        # points with smaller indices; redo those rows exhaustively
        unsure = d2[:, k - 1] >= d2[:, m - 1]
        unsure |= ~np.any(cand == rows[:, None], axis=-1)
        for r in np.flatnonzero(unsure):
            full = _sq_dist(coords, coords[r])
            full[r] = -np.inf
            out[r] = np.argsort(full, kind="stable")[:k]
    return out


def knn_search(coords, k: int) -> np.ndarray:
    """K-NN index lists for one ``(N, L)`` cloud."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2:
        raise DimensionError(f"knn_search expects (N, L) coordinates, got {coords.shape}")
    if coords.shape[0] <= EXHAUSTIVE_MAX_N:
        return exhaustive_knn(coords, k)
    return kdtree_knn(coords, k)


def knn_batch(coords, k: int) -> np.ndarray:
    """K-NN over every cloud of a ``(..., N, L)`` stack, returning ``(..., N, K)``."""
    coords = np.asarray(coords, dtype=np.float64)
    n, dim = coords.shape[-2:]
    _check_k(n, k)
    if k == 1:
        return np.broadcast_to(np.arange(n)[:, None], coords.shape[:-1] + (1,)).copy()
    if n <= EXHAUSTIVE_MAX_N:
        return exhaustive_knn(coords, k)
    flat = coords.reshape(-1, n, dim)
    out = np.stack([kdtree_knn(c, k) for c in flat])
    return out.reshape(coords.shape[:-1] + (k,))


def neighbor_index(frame: PointCloudFrame, k: int) -> NeighborIndex:
    return NeighborIndex(knn_batch(frame.coords, k))


def gather_points(feats: Tensor, idx: np.ndarray) -> Tensor:
    """Differentiable neighbour gather.

    ``feats`` is ``(..., N, F)`` and ``idx`` is ``(..., N, K)`` with the same
    leading axes; the result is ``(..., N, K, F)`` where slot ``[..., n, k]``
    holds the features of point ``idx[..., n, k]`` from the same cloud.
    """
    lead = feats.shape[:-2]
    n, f = feats.shape[-2:]
    if idx.shape[:-1] != lead + (n,):
        raise DimensionError(
            f"stale neighbour index: {idx.shape} does not match features {feats.shape}"
        )
    k = idx.shape[-1]
    clouds = int(np.prod(lead)) if lead else 1
    offsets = (np.arange(clouds) * n).reshape(lead + (1, 1)) if lead else 0
    flat_idx = (idx + offsets).reshape(-1)
    src = feats.data.reshape(clouds * n, f)
    out = src[flat_idx].reshape(lead + (n, k, f))

    def backward(g):
        g2 = g.reshape(-1, f)
        full = np.empty((clouds * n, f))
        for c in range(f):
            full[:, c] = np.bincount(flat_idx, weights=g2[:, c], minlength=clouds * n)
        return (full.reshape(feats.shape),)

    return _make(out, (feats,), backward, "gather_points")


def gather_neighbors(frame: PointCloudFrame, index: NeighborIndex) -> np.ndarray:
    """Layout ``(U, N, K, H + L)`` of the neighbour blocks of every point."""
    if index.indices.shape[:2] != (frame.U, frame.N):
        raise DimensionError(
            f"stale neighbour index {index.indices.shape} for frame with U={frame.U}, N={frame.N}"
        )
    return gather_points(Tensor(frame.features()), index.indices).data
