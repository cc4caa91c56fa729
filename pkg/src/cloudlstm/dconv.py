"""Dynamic point-cloud convolution.

For every anchor point the operator takes its K nearest neighbours (found
per input channel, from that channel's own coordinate features), and sums
weighted value and coordinate features over neighbours, features and input
channels. Weights are indexed by neighbour rank, which is what makes the
result independent of point order.

:func:`dconv` is the fast path: gather, fold the channel axis into the
feature axis and run one ``(1, K)`` convolution. :func:`dconv_reference`
evaluates the same sums with explicit loops and exists only to check it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import intactness
from . import tensor as T
from .pointcloud import CapacityError, PointCloudFrame, gather_points, knn_batch
from .tensor import DimensionError, Tensor


@dataclass
class DConvWeights:
    """``w`` has shape (U_in, K, F, F, U_out) with F = H + L; ``b`` has shape (U_out,)."""

    w: Tensor
    b: Tensor

    def __post_init__(self):
        self.w = T.as_tensor(self.w)
        self.b = T.as_tensor(self.b)
        if self.w.ndim != 5:
            raise DimensionError(f"D-Conv weight must be 5-D, got shape {self.w.shape}")
        if self.w.shape[2] != self.w.shape[3]:
            raise DimensionError(f"D-Conv weight feature axes differ: {self.w.shape}")
        if self.b.shape != (self.w.shape[4],):
            raise DimensionError(f"bias shape {self.b.shape} != (U_out={self.w.shape[4]},)")

    @property
    def u_in(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]

    @property
    def n_features(self) -> int:
        return self.w.shape[2]

    @property
    def u_out(self) -> int:
        return self.w.shape[4]

    @classmethod
    def init(cls, u_in, k, n_features, u_out, rng, requires_grad=True) -> "DConvWeights":
        """Glorot-uniform weights, zero bias."""
        fan_in = k * n_features * u_in
        fan_out = k * n_features * u_out
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(u_in, k, n_features, n_features, u_out))
        return cls(Tensor(w, requires_grad), Tensor(np.zeros(u_out), requires_grad))

    @classmethod
    def zeros(cls, u_in, k, n_features, u_out, bias=0.0) -> "DConvWeights":
        return cls(
            Tensor(np.zeros((u_in, k, n_features, n_features, u_out))),
            Tensor(np.full(u_out, float(bias))),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass(frozen=True)
class DConvConfig:
    k_neighbors: int
    coord_sigmoid: bool = True

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")


def _check(x_shape, weights: DConvWeights, k: int, n_values: int) -> None:
    u_in, n, f = x_shape[-3:]
    if weights.k != k:
        raise DimensionError(f"K axis: weights have {weights.k}, config asks for {k}")
    if weights.u_in != u_in:
        raise DimensionError(f"U_in axis: weights expect {weights.u_in} channels, input has {u_in}")
    if weights.n_features != f:
        raise DimensionError(f"H+L axis: weights expect {weights.n_features} features, input has {f}")
    if not 1 <= n_values < f:
        raise DimensionError(f"n_values={n_values} must leave at least one coordinate in F={f}")


def coord_sigmoid(x: Tensor, n_values: int) -> Tensor:
    """Squash only the coordinate features (trailing axis past ``n_values``)."""
    return T.concat([x[..., :n_values], T.sigmoid(x[..., n_values:])], axis=-1)


def dconv_weighting(x: Tensor, idx: np.ndarray, weights: DConvWeights) -> Tensor:
    """Weighted neighbour sum plus bias for a fixed neighbour index.

    ``x`` is ``(..., U_in, N, F)`` and ``idx`` ``(..., U_in, N, K)``; returns
    ``(..., U_out, N, F)`` before any coordinate squashing.
    """
    lead = x.shape[:-3]
    u_in, n, f = x.shape[-3:]
    k, u_out = weights.k, weights.u_out
    nb = len(lead)
    g = gather_points(x, idx)  # (..., U_in, N, K, F)
    # (..., N, K, F, U_in) -> (..., N, K, F * U_in)
    perm = tuple(range(nb)) + (nb + 1, nb + 2, nb + 3, nb)
    g = g.transpose(perm).reshape(lead + (n, k, f * u_in))
    # (U_in, K, F, F', U_out) -> (K, F, U_in, F', U_out) -> (1, K, F * U_in, F' * U_out)
    kern = weights.w.transpose(1, 2, 0, 3, 4).reshape(1, k, f * u_in, f * u_out)
    out = T.conv2d(g, kern).reshape(lead + (n, f, u_out))
    perm = tuple(range(nb)) + (nb + 2, nb, nb + 1)
    out = out.transpose(perm)  # (..., U_out, N, F)
    bias = T.broadcast_to(weights.b.reshape(u_out, 1, 1), out.shape)
    return out + bias


def dconv(x: Tensor, weights: DConvWeights, n_values: int, coord_sigmoid_on: bool = True) -> Tensor:
    """D-Conv on a ``(..., U_in, N, H + L)`` feature tensor.

    Neighbour sets are recomputed from the input's own coordinate features,
    per channel, and are not differentiated through.
    """
    x = T.as_tensor(x)
    k = weights.k
    _check(x.shape, weights, k, n_values)
    idx = knn_batch(x.data[..., n_values:], k)
    out = dconv_weighting(x, idx, weights)
    intactness.check(x.shape[-2], out.shape[-2], "dconv")
    return coord_sigmoid(out, n_values) if coord_sigmoid_on else out


def dconv_apply(frame: PointCloudFrame, weights: DConvWeights, cfg: DConvConfig) -> PointCloudFrame:
    _check(frame.features().shape, weights, cfg.k_neighbors, frame.H)
    out = dconv(Tensor(frame.features()), weights, frame.H, cfg.coord_sigmoid)
    return PointCloudFrame.from_features(out, frame.H, frame.timestamp)


def _ranked_neighbours(coords: np.ndarray, k: int) -> list[list[int]]:
    n = len(coords)
    if k > n:
        raise CapacityError(f"K={k} exceeds the number of points N={n}")
    out = []
    for a in range(n):
        def key(p):
            d = sum((float(coords[p, l]) - float(coords[a, l])) ** 2 for l in range(coords.shape[1]))
            return (p != a, d, p)
        out.append(sorted(range(n), key=key)[:k])
    return out


def dconv_reference(frame: PointCloudFrame, weights: DConvWeights, cfg: DConvConfig) -> PointCloudFrame:
    """Loop-by-loop evaluation of the weighted neighbour sum."""
    h_dim, l_dim = frame.H, frame.L
    f = h_dim + l_dim
    k = cfg.k_neighbors
    _check(frame.features().shape, weights, k, h_dim)
    w = weights.w.data
    b = weights.b.data
    u_in, n_pts, u_out = frame.U, frame.N, weights.u_out
    nbrs = [_ranked_neighbours(frame.coords[i], k) for i in range(u_in)]
    v_out = np.zeros((u_out, n_pts, h_dim))
    c_out = np.zeros((u_out, n_pts, l_dim))
    for j in range(u_out):
        for n in range(n_pts):
            for mo in range(f):
                acc = 0.0
                for i in range(u_in):
                    for kk in range(k):
                        p = nbrs[i][n][kk]
                        for h in range(h_dim):
                            acc += w[i, kk, h, mo, j] * frame.values[i, p, h]
                        for l in range(l_dim):
                            acc += w[i, kk, h_dim + l, mo, j] * frame.coords[i, p, l]
                acc += b[j]
                if mo < h_dim:
                    v_out[j, n, mo] = acc
                elif cfg.coord_sigmoid:
                    c_out[j, n, mo - h_dim] = 1.0 / (1.0 + np.exp(-acc))
                else:
                    c_out[j, n, mo - h_dim] = acc
    return PointCloudFrame(v_out, c_out, frame.timestamp)
