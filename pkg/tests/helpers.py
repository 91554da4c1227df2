"""Shared builders and a central-difference gradient checker."""
import numpy as np

from raincast.gat import EdgeIndex


def random_graph(rng, n_nodes, p=0.5, allow_empty=True):
    src, dst = [], []
    for j in range(n_nodes):
        for i in range(n_nodes):
            if i != j and rng.random() < p:
                src.append(i)
                dst.append(j)
    if not src and not allow_empty:
        src, dst = [0], [1 % n_nodes]
    return EdgeIndex(np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                     rng.normal(size=len(src)), n_nodes)


def rel_err(a, b, floor=1e-6):
    """Elementwise relative error with an absolute floor for near-zero gradients."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_grad(loss, arr, step=1e-5):
    """Central differences of ``loss()`` with respect to every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + step
        lp = loss()
        arr[ix] = old - step
        lm = loss()
        arr[ix] = old
        g[ix] = (lp - lm) / (2 * step)
    return g


def planted_stations(rng, groups=3, per_group=4, years=10):
    """Station groups with far-apart coordinates and distinct seasonal peaks."""
    from raincast.ingest import StationRecord

    centers = [(6.0, 99.0), (13.0, 104.0), (19.0, 98.0), (9.0, 103.0)][:groups]
    peaks = [11, 7, 3, 1][:groups]
    out, truth = [], []
    for g in range(groups):
        ids = set()
        for k in range(per_group):
            sid = f"G{g}S{k}"
            vals = {}
            for y in range(2000, 2000 + years):
                for m in range(1, 13):
                    base = 100 + 80 * np.cos(2 * np.pi * (m - peaks[g]) / 12)
                    vals[(y, m)] = float(base * rng.uniform(0.9, 1.1))
            lat, lon = centers[g]
            out.append(StationRecord(sid, lat + rng.normal(0, 0.1), lon + rng.normal(0, 0.1), 10.0, vals))
            ids.add(sid)
        truth.append(frozenset(ids))
    return out, set(truth)
