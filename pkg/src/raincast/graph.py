"""Station clustering, teleconnection screening and per-cluster graph assembly."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .ingest import MonthlyPanel, StationRecord


class GraphError(ValueError):
    pass


@dataclass
class ClusterAssignment:
    clusters: dict[str, int]  # station_id -> 1-based cluster id

    @property
    def n_clusters(self) -> int:
        return len(set(self.clusters.values()))

    def members(self, cluster_id: int) -> list[str]:
        return [s for s, c in self.clusters.items() if c == cluster_id]

    def as_sets(self) -> set[frozenset[str]]:
        return {frozenset(self.members(c)) for c in set(self.clusters.values())}


def monthly_climatology(record: StationRecord) -> np.ndarray:
    sums = np.zeros(12)
    counts = np.zeros(12)
    for (_, m), v in record.rainfall.items():
        if not math.isnan(v):
            sums[m - 1] += v
            counts[m - 1] += 1
    if np.any(counts == 0):
        raise GraphError(f"{record.station_id}: climatology has empty calendar months")
    return sums / counts


def _zscore_columns(a: np.ndarray) -> np.ndarray:
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return (a - mu) / sd


def clustering_features(records: list[StationRecord], n_components: int) -> np.ndarray:
    """PCA scores of [lat, lon, climatology], every column standardised across stations."""
    clim = np.array([monthly_climatology(r) for r in records])
    coords = np.array([[r.lat, r.lon] for r in records], dtype=float)
    data = _zscore_columns(np.column_stack([coords, clim]))
    if not 1 <= n_components <= data.shape[1]:
        raise GraphError(f"n_components must be in [1, {data.shape[1]}]")
    centred = data - data.mean(axis=0)
    u, s, _vt = np.linalg.svd(centred, full_matrices=False)
    return u[:, :n_components] * s[:n_components]


def agglomerate(points: np.ndarray, distance_d: float) -> list[list[int]]:
    """Centroid-linkage merging while the closest centroid pair is nearer than ``distance_d``.

    Ties go to the lexicographically smallest (cluster, cluster) pair, where
    clusters are keyed by their smallest member index.
    """
    groups = [[i] for i in range(len(points))]
    cents = [points[i].astype(float) for i in range(len(points))]
    while len(groups) > 1:
        best = None
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                d = float(np.linalg.norm(cents[a] - cents[b]))
                key = (d, min(groups[a]), min(groups[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        (d, _, _), a, b = best
        if not d < distance_d:
            break
        merged = sorted(groups[a] + groups[b])
        cent = points[merged].mean(axis=0)
        for k in (b, a):
            del groups[k], cents[k]
        groups.append(merged)
        cents.append(cent)
    return groups


def cluster_stations(records: list[StationRecord], n_components: int,
                     distance_d: float) -> ClusterAssignment:
    if len(records) < 2:
        raise GraphError("need at least two stations to cluster")
    # sort by id so the partition does not depend on input order
    order = sorted(range(len(records)), key=lambda i: records[i].station_id)
    recs = [records[i] for i in order]
    pts = clustering_features(recs, n_components)
    groups = agglomerate(pts, distance_d)
    groups.sort(key=min)
    return ClusterAssignment({recs[i].station_id: cid for cid, g in enumerate(groups, 1) for i in g})


@dataclass
class ScreenResult:
    index: str
    accepted: bool
    mean_abs_r: float
    r: dict[str, float]


def pearson_screen(panel: MonthlyPanel, index: str, stations: list[str], r_threshold: float = 0.4,
                   extreme_percentile: float | None = None) -> ScreenResult:
    """Accept the index when the station-mean of |Pearson r| exceeds ``r_threshold``.

    With ``extreme_percentile`` the correlation for each station only uses
    months where that station's rain is above its own percentile.
    """
    if len(panel) < 24:
        raise GraphError("pearson_screen needs at least 24 months")
    x = panel.column(index)
    rs = {}
    for s in stations:
        y = panel.column(s)
        mask = np.ones(len(y), dtype=bool)
        if extreme_percentile is not None:
            mask = y > np.percentile(y, extreme_percentile)
        xs, ys = x[mask], y[mask]
        if xs.size < 3 or np.std(xs) == 0 or np.std(ys) == 0:
            raise GraphError(f"zero-variance series for {index}/{s}")
        rs[s] = float(np.corrcoef(xs, ys)[0, 1])
    mean_abs = float(np.mean([abs(v) for v in rs.values()]))
    return ScreenResult(index, mean_abs > r_threshold, mean_abs, rs)


@dataclass
class GrangerResult:
    index: str
    lag: int
    p_value: float
    statistic: float


@dataclass
class GrangerLagFit:
    lag: int
    rss_restricted: float
    rss_unrestricted: float
    n_obs: int
    statistic: float
    p_value: float


def lag_design(y: np.ndarray, x: np.ndarray | None, lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Target ``y[t]`` for t >= lag with columns [1, y[t-1..t-lag], x[t-1..t-lag]]."""
    n = len(y)
    cols = [np.ones(n - lag)]
    cols += [y[lag - i:n - i] for i in range(1, lag + 1)]
    if x is not None:
        cols += [x[lag - i:n - i] for i in range(1, lag + 1)]
    return np.column_stack(cols), y[lag:]


def _rss(A: np.ndarray, b: np.ndarray) -> float:
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise np.linalg.LinAlgError("collinear design matrix")
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    r = b - A @ coef
    return float(r @ r)


def granger_fit(y, x, lag: int) -> GrangerLagFit:
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    Ar, b = lag_design(y, None, lag)
    Au, _ = lag_design(y, x, lag)
    rss_r, rss_u = _rss(Ar, b), _rss(Au, b)
    n = len(b)
    stat = n * (rss_r - rss_u) / rss_u
    return GrangerLagFit(lag, rss_r, rss_u, n, stat, float(stats.chi2.sf(stat, lag)))


def granger_lag(y, x, max_lag: int = 3, alpha: float = 0.1, name: str = "") -> GrangerResult | None:
    """Smallest lag at which ``x`` Granger-causes ``y`` (chi-square test at level ``alpha``)."""
    y = np.asarray(y, dtype=float)
    if len(y) <= 2 * max_lag + 10:
        raise GraphError("series too short for the requested max_lag")
    for lag in range(1, max_lag + 1):
        try:
            fit = granger_fit(y, x, lag)
        except np.linalg.LinAlgError:
            continue
        if fit.p_value <= alpha:
            return GrangerResult(name, lag, fit.p_value, fit.statistic)
    return None


@dataclass
class Edge:
    src: str
    dst: str
    lag: int
    feature: float
    origin: str = "screen"


@dataclass
class TeleconnectionGraph:
    cluster_id: int
    nodes: list[tuple[str, str]]  # (node_id, kind)
    edges: list[Edge] = field(default_factory=list)

    @property
    def node_ids(self) -> list[str]:
        return [n for n, _ in self.nodes]

    @property
    def stations(self) -> list[str]:
        return [n for n, k in self.nodes if k == "station"]

    @property
    def indices(self) -> list[str]:
        return [n for n, k in self.nodes if k == "index"]

    def index_lags(self) -> dict[str, int]:
        lags: dict[str, int] = {}
        for e in self.edges:
            lags[e.src] = e.lag
        return lags

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer (src, dst) node positions and the per-edge feature vector."""
        pos = {n: i for i, n in enumerate(self.node_ids)}
        src = np.array([pos[e.src] for e in self.edges], dtype=np.int64)
        dst = np.array([pos[e.dst] for e in self.edges], dtype=np.int64)
        feat = np.array([e.feature for e in self.edges], dtype=float)
        return src, dst, feat

    def to_json(self) -> str:
        return json.dumps({
            "cluster_id": self.cluster_id,
            "nodes": [{"id": n, "kind": k} for n, k in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "lag": e.lag, "feature": e.feature, "origin": e.origin}
                      for e in self.edges],
        }, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TeleconnectionGraph":
        d = json.loads(text)
        return cls(d["cluster_id"], [(n["id"], n["kind"]) for n in d["nodes"]],
                   [Edge(e["src"], e["dst"], e["lag"], e["feature"], e["origin"]) for e in d["edges"]])


def assemble_graph(cluster_id: int, stations: list[str], accepted: dict[str, int],
                   edge_features: dict[str, float], forced: dict[str, int] | None = None,
                   known_indices: list[str] | None = None) -> TeleconnectionGraph:
    """Index->station graph for one cluster.

    ``accepted`` and ``forced`` map index name to lag in months. Forced edges
    are kept whatever the screening said and are tagged ``constraint``.
    """
    forced = forced or {}
    for name in forced:
        if known_indices is not None and name not in known_indices:
            raise GraphError(f"forced edge references unknown index {name!r}")
    for s in stations:
        if s not in edge_features:
            raise GraphError(f"no edge feature for station {s}")
    lags = {**accepted, **forced}
    names = sorted(lags)
    nodes = [(s, "station") for s in stations] + [(n, "index") for n in names]
    edges = [Edge(n, s, int(lags[n]), float(edge_features[s]), "constraint" if n in forced else "screen")
             for n in names for s in stations]
    return TeleconnectionGraph(cluster_id, nodes, edges)
