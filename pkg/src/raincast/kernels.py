"""Hot inner loops, each in a compiled (numba) and a vectorised numpy flavour.

The public names at the bottom of the module dispatch to whichever backend
``raincast._accel`` selected. Both flavours stay importable under explicit
``*_numba`` / ``*_numpy`` names so tests can check them against each other.

Shape conventions for the graph kernels: ``B`` is a flattened batch axis
(time x gate x head), ``E`` edges, ``N`` nodes, ``D`` feature width. Edge ``e``
points from ``src[e]`` into ``dst[e]``; the neighbourhood of node ``i`` is the
set of edges with ``dst == i``.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def segment_softmax_numpy(e, dst, n_nodes):
    B, E = e.shape
    seg_max = np.full((B, n_nodes), -np.inf)
    np.maximum.at(seg_max, (slice(None), dst), e)
    ex = np.exp(e - seg_max[:, dst])
    denom = np.zeros((B, n_nodes))
    np.add.at(denom, (slice(None), dst), ex)
    return ex / denom[:, dst]


def segment_softmax_backward_numpy(dalpha, alpha, dst, n_nodes):
    B = alpha.shape[0]
    dot = np.zeros((B, n_nodes))
    np.add.at(dot, (slice(None), dst), alpha * dalpha)
    return alpha * (dalpha - dot[:, dst])


def aggregate_numpy(alpha, Z, src, dst, isolated):
    B, N, D = Z.shape
    out = np.zeros((B, N, D))
    np.add.at(out, (slice(None), dst), alpha[:, :, None] * Z[:, src])
    out[:, isolated] = Z[:, isolated]
    return out


def aggregate_backward_numpy(dM, alpha, Z, src, dst, isolated):
    dalpha = np.einsum("bed,bed->be", dM[:, dst], Z[:, src])
    dZ = np.zeros_like(Z)
    np.add.at(dZ, (slice(None), src), alpha[:, :, None] * dM[:, dst])
    dZ[:, isolated] += dM[:, isolated]
    return dalpha, dZ


def idw_numpy(px, py, values, gx, gy, power, eps):
    dx = gx[:, None] - px[None, :]
    dy = gy[:, None] - py[None, :]
    dist = np.hypot(dx, dy)
    hit = dist < eps
    with np.errstate(divide="ignore"):
        w = np.where(hit, 0.0, dist ** (-power))
    # offsets from the first value keep constant fields exact
    out = values[0] + (w @ (values - values[0])) / w.sum(axis=1)
    any_hit = hit.any(axis=1)
    if any_hit.any():
        first = np.argmax(hit, axis=1)
        out[any_hit] = values[first[any_hit]]
    return out


def gpd_profile_loglik_numpy(x, thetas, tiny):
    n = x.shape[0]
    xbar = x.mean()
    out = np.empty(thetas.shape[0])
    for j, th in enumerate(thetas):
        if abs(th) * x.max() < tiny:
            out[j] = -n * np.log(xbar) - n
            continue
        arg = th * x
        if np.any(arg <= -1.0):
            out[j] = -np.inf
            continue
        xi = np.log1p(arg).mean()
        scale = xi / th
        if scale <= 0.0:
            out[j] = -np.inf
            continue
        out[j] = -n * np.log(scale) - n * (1.0 + xi)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit
def segment_softmax_numba(e, dst, n_nodes):
    B, E = e.shape
    alpha = np.empty((B, E))
    seg_max = np.empty(n_nodes)
    denom = np.empty(n_nodes)
    for b in range(B):
        seg_max[:] = -np.inf
        denom[:] = 0.0
        for k in range(E):
            if e[b, k] > seg_max[dst[k]]:
                seg_max[dst[k]] = e[b, k]
        for k in range(E):
            v = np.exp(e[b, k] - seg_max[dst[k]])
            alpha[b, k] = v
            denom[dst[k]] += v
        for k in range(E):
            alpha[b, k] /= denom[dst[k]]
    return alpha


@njit
def segment_softmax_backward_numba(dalpha, alpha, dst, n_nodes):
    B, E = alpha.shape
    out = np.empty((B, E))
    dot = np.empty(n_nodes)
    for b in range(B):
        dot[:] = 0.0
        for k in range(E):
            dot[dst[k]] += alpha[b, k] * dalpha[b, k]
        for k in range(E):
            out[b, k] = alpha[b, k] * (dalpha[b, k] - dot[dst[k]])
    return out


@njit
def aggregate_numba(alpha, Z, src, dst, isolated):
    B, N, D = Z.shape
    E = src.shape[0]
    out = np.zeros((B, N, D))
    for b in range(B):
        for k in range(E):
            a = alpha[b, k]
            i = dst[k]
            j = src[k]
            for d in range(D):
                out[b, i, d] += a * Z[b, j, d]
        for i in range(N):
            if isolated[i]:
                for d in range(D):
                    out[b, i, d] = Z[b, i, d]
    return out


@njit
def aggregate_backward_numba(dM, alpha, Z, src, dst, isolated):
    B, N, D = Z.shape
    E = src.shape[0]
    dalpha = np.zeros((B, E))
    dZ = np.zeros((B, N, D))
    for b in range(B):
        for k in range(E):
            i = dst[k]
            j = src[k]
            a = alpha[b, k]
            acc = 0.0
            for d in range(D):
                acc += dM[b, i, d] * Z[b, j, d]
                dZ[b, j, d] += a * dM[b, i, d]
            dalpha[b, k] = acc
        for i in range(N):
            if isolated[i]:
                for d in range(D):
                    dZ[b, i, d] += dM[b, i, d]
    return dalpha, dZ


@njit
def idw_numba(px, py, values, gx, gy, power, eps):
    M = gx.shape[0]
    S = px.shape[0]
    out = np.empty(M)
    for m in range(M):
        num = 0.0
        den = 0.0
        snapped = -1
        for s in range(S):
            d = np.hypot(gx[m] - px[s], gy[m] - py[s])
            if d < eps:
                snapped = s
                break
            w = d ** (-power)
            num += w * (values[s] - values[0])
            den += w
        if snapped >= 0:
            out[m] = values[snapped]
        else:
            out[m] = values[0] + num / den
    return out


@njit
def gpd_profile_loglik_numba(x, thetas, tiny):
    n = x.shape[0]
    xbar = 0.0
    xmax = 0.0
    for v in x:
        xbar += v
        if v > xmax:
            xmax = v
    xbar /= n
    out = np.empty(thetas.shape[0])
    for j in range(thetas.shape[0]):
        th = thetas[j]
        if abs(th) * xmax < tiny:
            out[j] = -n * np.log(xbar) - n
            continue
        acc = 0.0
        bad = False
        for v in x:
            arg = th * v
            if arg <= -1.0:
                bad = True
                break
            acc += np.log1p(arg)
        if bad:
            out[j] = -np.inf
            continue
        xi = acc / n
        scale = xi / th
        if scale <= 0.0:
            out[j] = -np.inf
            continue
        out[j] = -n * np.log(scale) - n * (1.0 + xi)
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    segment_softmax = segment_softmax_numba
    segment_softmax_backward = segment_softmax_backward_numba
    aggregate = aggregate_numba
    aggregate_backward = aggregate_backward_numba
    _idw = idw_numba
    _gpd_profile = gpd_profile_loglik_numba
else:
    segment_softmax = segment_softmax_numpy
    segment_softmax_backward = segment_softmax_backward_numpy
    aggregate = aggregate_numpy
    aggregate_backward = aggregate_backward_numpy
    _idw = idw_numpy
    _gpd_profile = gpd_profile_loglik_numpy


def idw(px, py, values, gx, gy, power=2.0, eps=1e-9):
    """Inverse-distance weights from scattered points onto query points."""
    return _idw(
        np.ascontiguousarray(px, dtype=np.float64),
        np.ascontiguousarray(py, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(gx, dtype=np.float64),
        np.ascontiguousarray(gy, dtype=np.float64),
        float(power),
        float(eps),
    )


def gpd_profile_loglik(x, thetas, tiny=1e-12):
    """GPD log-likelihood profiled over shape at each ``theta = shape/scale``."""
    return _gpd_profile(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(thetas, dtype=np.float64),
        float(tiny),
    )
