"""Multi-head graph attention with edge features, forward and exact reverse mode.

Several independent GATs that share a graph (the four gates of a recurrent
cell, say) are kept as one *bank*: every weight tensor carries a leading bank
axis ``G``. Inputs may carry a leading time axis ``T``, so a whole input
sequence goes through in a single batched call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

ACTIVATIONS = ("sigmoid", "identity", "elu")


class GatError(ValueError):
    pass


@dataclass
class EdgeIndex:
    """Directed edges ``src -> dst`` over ``n_nodes`` with one scalar feature each."""

    src: np.ndarray
    dst: np.ndarray
    feat: np.ndarray
    n_nodes: int

    def __post_init__(self):
        self.src = np.ascontiguousarray(self.src, dtype=np.int64)
        self.dst = np.ascontiguousarray(self.dst, dtype=np.int64)
        self.feat = np.ascontiguousarray(self.feat, dtype=float)
        if not (self.src.shape == self.dst.shape == self.feat.shape):
            raise GatError("edge arrays must have equal length")
        if self.src.size and (max(self.src.max(), self.dst.max()) >= self.n_nodes or
                              min(self.src.min(), self.dst.min()) < 0):
            raise GatError("edge references a node outside the graph")
        self.isolated = np.ones(self.n_nodes, dtype=np.bool_)
        self.isolated[self.dst] = False
        self.inc_dst = np.zeros((self.src.size, self.n_nodes))
        self.inc_dst[np.arange(self.src.size), self.dst] = 1.0
        self.inc_src = np.zeros((self.src.size, self.n_nodes))
        self.inc_src[np.arange(self.src.size), self.src] = 1.0

    @classmethod
    def from_graph(cls, graph) -> "EdgeIndex":
        src, dst, feat = graph.arrays()
        return cls(src, dst, feat, len(graph.nodes))

    @property
    def n_edges(self) -> int:
        return int(self.src.size)


@dataclass
class GatWeights:
    W_node: np.ndarray  # (G, K, D, F)
    W_edge: np.ndarray  # (G, K, C): lifts the scalar edge feature to C dims
    a: np.ndarray       # (G, K, 2D + C)
    slope: float = 0.2
    activation: str = "sigmoid"

    def __post_init__(self):
        G, K, D, _F = self.W_node.shape
        C = self.W_edge.shape[-1]
        if self.W_edge.shape[:2] != (G, K) or self.a.shape != (G, K, 2 * D + C):
            raise GatError("inconsistent GAT weight shapes")
        if self.activation not in ACTIVATIONS:
            raise GatError(f"unknown activation {self.activation!r}")

    @property
    def heads(self) -> int:
        return self.W_node.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W_node.shape[2]

    @property
    def in_dim(self) -> int:
        return self.W_node.shape[3]

    def params(self) -> dict[str, np.ndarray]:
        return {"W_node": self.W_node, "W_edge": self.W_edge, "a": self.a}


def multi_head_config(K: int, hidden: int, in_features: int, edge_dim: int = 4, bank: int = 1,
                      rng: np.random.Generator | int | None = 0, slope: float = 0.2,
                      activation: str = "sigmoid") -> GatWeights:
    """Allocate ``bank`` GATs of ``K`` heads each, uniform(+-1/sqrt(fan_in)) initialised."""
    if K < 1:
        raise GatError("need at least one attention head")
    rng = np.random.default_rng(rng)

    def uni(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    return GatWeights(
        W_node=uni((bank, K, hidden, in_features), in_features),
        W_edge=uni((bank, K, edge_dim), 1),
        a=uni((bank, K, 2 * hidden + edge_dim), 2 * hidden + edge_dim),
        slope=slope,
        activation=activation,
    )


def _act(A, kind):
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-A))
    if kind == "elu":
        return np.where(A > 0, A, np.expm1(np.minimum(A, 0.0)))
    return A


def _act_grad(A, out, kind):
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "elu":
        return np.where(A > 0, 1.0, out + 1.0)
    return np.ones_like(A)


@dataclass
class GatCache:
    X: np.ndarray
    Z: np.ndarray
    s: np.ndarray
    alpha: np.ndarray
    A: np.ndarray
    out: np.ndarray
    squeeze: bool
    weights_id: int


def gat_forward(X, edges: EdgeIndex, w: GatWeights):
    """Node embeddings and attention coefficients.

    ``X`` is (N, F) or (T, N, F). Returns ``(out, alpha, cache)`` with ``out``
    shaped (T, G, N, D) and ``alpha`` (T, G, K, E); a 2-D input drops the T axis.
    A node without in-edges is embedded from its own transformed features.
    """
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != edges.n_nodes or X.shape[2] != w.in_dim:
        raise GatError(f"node features of shape {X.shape} do not match graph/weights")
    if not np.all(np.isfinite(X)):
        raise GatError("non-finite node features")
    T, N, _ = X.shape
    G, K, D, _ = w.W_node.shape
    E = edges.n_edges

    Z = np.ascontiguousarray(np.einsum("gkdf,tnf->tgknd", w.W_node, X))
    a_dst, a_src, a_edge = w.a[..., :D], w.a[..., D:2 * D], w.a[..., 2 * D:]
    p_dst = np.einsum("tgknd,gkd->tgkn", Z, a_dst)
    p_src = np.einsum("tgknd,gkd->tgkn", Z, a_src)
    q = np.einsum("gkc,gkc->gk", w.W_edge, a_edge)[..., None] * edges.feat  # (G, K, E)
    s = p_dst[..., edges.dst] + p_src[..., edges.src] + q
    e = np.where(s > 0, s, w.slope * s)

    B = T * G * K
    alpha = kernels.segment_softmax(np.ascontiguousarray(e.reshape(B, E)), edges.dst, N)
    M = kernels.aggregate(alpha, Z.reshape(B, N, D), edges.src, edges.dst, edges.isolated)
    A = M.reshape(T, G, K, N, D).mean(axis=2)
    out = _act(A, w.activation)
    alpha = alpha.reshape(T, G, K, E)
    cache = GatCache(X, Z, s, alpha, A, out, squeeze, id(w))
    if squeeze:
        return out[0], alpha[0], cache
    return out, alpha, cache


def gat_backward(dout, cache: GatCache, edges: EdgeIndex, w: GatWeights):
    """Reverse mode of :func:`gat_forward`: returns ``(grads, dX)``."""
    if cache is None or cache.weights_id != id(w):
        raise GatError("missing or stale forward cache")
    dout = np.asarray(dout, dtype=float)
    if cache.squeeze:
        dout = dout[None]
    X, Z, s, alpha, A, out = cache.X, cache.Z, cache.s, cache.alpha, cache.A, cache.out
    T, G, K, N, D = Z.shape
    E = edges.n_edges
    B = T * G * K

    dA = dout * _act_grad(A, out, w.activation)
    dM = np.ascontiguousarray(np.broadcast_to((dA / K)[:, :, None], (T, G, K, N, D)))
    dalpha, dZ = kernels.aggregate_backward(dM.reshape(B, N, D), alpha.reshape(B, E), Z.reshape(B, N, D),
                                            edges.src, edges.dst, edges.isolated)
    de = kernels.segment_softmax_backward(dalpha, alpha.reshape(B, E), edges.dst, N)
    ds = de.reshape(T, G, K, E) * np.where(s > 0, 1.0, w.slope)
    dZ = dZ.reshape(T, G, K, N, D)

    a_dst, a_src, a_edge = w.a[..., :D], w.a[..., D:2 * D], w.a[..., 2 * D:]
    dp_dst = ds @ edges.inc_dst  # (T, G, K, N)
    dp_src = ds @ edges.inc_src
    dZ = dZ + dp_dst[..., None] * a_dst[None, :, :, None, :] + dp_src[..., None] * a_src[None, :, :, None, :]
    da = np.concatenate([
        np.einsum("tgkn,tgknd->gkd", dp_dst, Z),
        np.einsum("tgkn,tgknd->gkd", dp_src, Z),
        np.zeros_like(a_edge),
    ], axis=-1)
    dq = ds.sum(axis=0) @ edges.feat  # sum_e dq_e * f_e, shape (G, K)
    da[..., 2 * D:] = dq[..., None] * w.W_edge
    dW_edge = dq[..., None] * a_edge
    dW_node = np.einsum("tgknd,tnf->gkdf", dZ, X)
    dX = np.einsum("tgknd,gkdf->tnf", dZ, w.W_node)
    grads = {"W_node": dW_node, "W_edge": dW_edge, "a": da}
    return grads, (dX[0] if cache.squeeze else dX)
