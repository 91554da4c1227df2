"""Graph-attention LSTM cell, horizon readout and snapshot windows."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .gat import EdgeIndex, GatWeights, gat_backward, gat_forward, multi_head_config
from .ingest import Month, MonthlyPanel

GATES = ("f", "i", "c", "o")


class RecurrentError(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ModelConfig:
    n_nodes: int
    in_features: int = 3
    hidden: int = 32
    heads: int = 8
    layers: int = 1
    window: int = 24
    horizon: int = 12
    edge_dim: int = 4
    dropout: float = 0.0
    slope: float = 0.2
    activation: str = "sigmoid"
    recurrent_proj: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise RecurrentError("h and c must have the same shape")

    @classmethod
    def zeros(cls, n_nodes: int, hidden: int) -> "CellState":
        return cls(np.zeros((n_nodes, hidden)), np.zeros((n_nodes, hidden)))


@dataclass
class CellWeights:
    """One recurrent layer: a bank of four gate GATs (f, i, c~, o) plus per-node biases."""

    gat: GatWeights
    b: np.ndarray                      # (4, N, D)
    U: np.ndarray | None = None        # (4, D, D) optional recurrent projection

    def params(self) -> dict[str, np.ndarray]:
        p = dict(self.gat.params())
        p["b"] = self.b
        if self.U is not None:
            p["U"] = self.U
        return p


def _gate_preacts(gat_t, h_prev, w: CellWeights):
    if w.U is None:
        return gat_t + h_prev[None] + w.b
    return gat_t + np.einsum("nd,gde->gne", h_prev, w.U) + w.b


def _gates(pre):
    return sigmoid(pre[0]), sigmoid(pre[1]), np.tanh(pre[2]), sigmoid(pre[3])


def cell_step(X_t, state: CellState, w: CellWeights, edges: EdgeIndex) -> CellState:
    """One recurrence step: gates from the GAT bank plus h_{t-1}, then c_t, then h_t."""
    gat_t, _alpha, _ = gat_forward(X_t, edges, w.gat)
    if gat_t.shape[1:] != state.h.shape:
        raise RecurrentError(f"GAT output {gat_t.shape[1:]} does not match hidden state {state.h.shape}")
    f, i, cc, o = _gates(_gate_preacts(gat_t, state.h, w))
    c = f * state.c + i * cc
    return CellState(o * np.tanh(c), c)


@dataclass
class AttentionLSTM:
    """Stacked graph-attention LSTM with a shared affine horizon readout."""

    config: ModelConfig
    layers: list[CellWeights]
    R: np.ndarray   # (D, H)
    rb: np.ndarray  # (H,)
    seed: int = 0

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "AttentionLSTM":
        rng = np.random.default_rng(seed)
        layers = []
        for l in range(config.layers):
            fin = config.in_features if l == 0 else config.hidden
            gat = multi_head_config(config.heads, config.hidden, fin, config.edge_dim, bank=4,
                                    rng=rng, slope=config.slope, activation=config.activation)
            U = None
            if config.recurrent_proj:
                lim = 1.0 / np.sqrt(config.hidden)
                U = rng.uniform(-lim, lim, size=(4, config.hidden, config.hidden))
            layers.append(CellWeights(gat, np.zeros((4, config.n_nodes, config.hidden)), U))
        lim = 1.0 / np.sqrt(config.hidden)
        R = rng.uniform(-lim, lim, size=(config.hidden, config.horizon))
        return cls(config, layers, R, np.zeros(config.horizon), seed)

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        for l, cw in enumerate(self.layers):
            for k, v in cw.params().items():
                p[f"l{l}.{k}"] = v
        p["readout.W"] = self.R
        p["readout.b"] = self.rb
        return p

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        """Copy ``values`` into the live arrays in place."""
        for name, arr in self.params().items():
            arr[...] = values[name]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    # -- forward / backward -------------------------------------------------

    def forward(self, X, edges: EdgeIndex, station_idx, train: bool = False,
                rng: np.random.Generator | None = None):
        """Run the W input steps and read out an (S, H) forecast in normalised units."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise RecurrentError("window inputs must be (W, N, F)")
        caches = []
        seq = X
        p = self.config.dropout
        for cw in self.layers:
            gat_out, _alpha, gcache = gat_forward(seq, edges, cw.gat)
            mask = None
            if train and p > 0:
                if rng is None:
                    raise RecurrentError("dropout needs an rng")
                mask = (rng.random(gat_out.shape) >= p) / (1.0 - p)
                gat_out = gat_out * mask
            W, _, N, D = gat_out.shape
            h = np.zeros((N, D))
            c = np.zeros((N, D))
            steps = []
            hs = np.empty((W, N, D))
            for t in range(W):
                f, i, cc, o = _gates(_gate_preacts(gat_out[t], h, cw))
                c_new = f * c + i * cc
                tc = np.tanh(c_new)
                h_new = o * tc
                steps.append((h, c, f, i, cc, o, tc))
                h, c = h_new, c_new
                hs[t] = h
            caches.append((gcache, mask, steps))
            seq = hs
        hT = seq[-1][station_idx]
        pred = hT @ self.R + self.rb
        return pred, (caches, hT, np.asarray(station_idx), seq.shape)

    def backward(self, dpred, cache, edges: EdgeIndex) -> dict[str, np.ndarray]:
        caches, hT, station_idx, top_shape = cache
        grads = {"readout.W": hT.T @ dpred, "readout.b": dpred.sum(axis=0)}
        dseq = np.zeros(top_shape)
        np.add.at(dseq[-1], station_idx, dpred @ self.R.T)
        for l in range(len(self.layers) - 1, -1, -1):
            cw = self.layers[l]
            gcache, mask, steps = caches[l]
            W = len(steps)
            N, D = dseq.shape[1:]
            dG = np.empty((W, 4, N, D))
            db = np.zeros_like(cw.b)
            dU = None if cw.U is None else np.zeros_like(cw.U)
            dh_next = np.zeros((N, D))
            dc_next = np.zeros((N, D))
            for t in range(W - 1, -1, -1):
                h_prev, c_prev, f, i, cc, o, tc = steps[t]
                dh = dseq[t] + dh_next
                do = dh * tc
                dc = dc_next + dh * o * (1.0 - tc * tc)
                dpre = np.stack([
                    dc * c_prev * f * (1.0 - f),
                    dc * cc * i * (1.0 - i),
                    dc * i * (1.0 - cc * cc),
                    do * o * (1.0 - o),
                ])
                dG[t] = dpre
                db += dpre
                dc_next = dc * f
                if cw.U is None:
                    dh_next = dpre.sum(axis=0)
                else:
                    dh_next = np.einsum("gne,gde->nd", dpre, cw.U)
                    dU += np.einsum("nd,gne->gde", h_prev, dpre)
            if mask is not None:
                dG = dG * mask
            ggrads, dX = gat_backward(dG, gcache, edges, cw.gat)
            for k, v in ggrads.items():
                grads[f"l{l}.{k}"] = v
            grads[f"l{l}.b"] = db
            if dU is not None:
                grads[f"l{l}.U"] = dU
            dseq = dX
        return grads


@dataclass
class SnapshotWindow:
    X: np.ndarray             # (W, N, F) node features
    Y: np.ndarray | None      # (S, H) targets, normalised; None past the panel end
    anchor: Month             # last input month
    target_months: list[Month] = field(default_factory=list)
    start: int = 0            # panel row of the first input month


def node_features(panel: MonthlyPanel, node_ids: list[str], lags: dict[str, int] | None = None) -> tuple[np.ndarray, int]:
    """Per-node [value, sin, cos] over the panel; lagged index columns are shifted.

    Returns ``(features (T, N, 3), first_valid_row)``.
    """
    lags = lags or {}
    T = len(panel)
    max_lag = max([lags.get(n, 0) for n in node_ids] + [0])
    feats = np.empty((T, len(node_ids), 3))
    feats[:, :, 1] = panel.embed[:, 0][:, None]
    feats[:, :, 2] = panel.embed[:, 1][:, None]
    for k, n in enumerate(node_ids):
        col = panel.column(n)
        lag = lags.get(n, 0) if n in panel.indices else 0
        shifted = np.full(T, np.nan)
        shifted[lag:] = col[:T - lag] if lag else col
        feats[:, k, 0] = shifted
    return feats, max_lag


def make_snapshots(panel: MonthlyPanel, W: int, H: int, stride: int = 1, graph=None,
                   target_rows: tuple[int, int] | None = None) -> list[SnapshotWindow]:
    """Sliding (W inputs, H targets) windows.

    Without a graph every station and index becomes a node at lag 0. With
    ``target_rows=(lo, hi)`` only windows whose targets fall in rows [lo, hi) are kept.
    """
    if W <= 0 or H <= 0 or stride <= 0:
        raise RecurrentError("W, H and stride must be positive")
    if graph is None:
        node_ids = panel.stations + panel.indices
        stations = panel.stations
        lags = {}
    else:
        node_ids = graph.node_ids
        stations = graph.stations
        lags = graph.index_lags()
    feats, first = node_features(panel, node_ids, lags)
    T = len(panel)
    if T - first < W + H:
        raise RecurrentError(f"panel of {T} months too short for W={W}, H={H}")
    lo, hi = target_rows if target_rows is not None else (0, T)
    srows = [panel.stations.index(s) for s in stations]
    out = []
    for start in range(first, T - W - H + 1, stride):
        t0 = start + W
        if t0 < lo or t0 + H > hi:
            continue
        Y = panel.rain[t0:t0 + H, srows].T.copy()
        out.append(SnapshotWindow(feats[start:t0].copy(), Y, panel.months[t0 - 1],
                                  panel.months[t0:t0 + H], start))
    return out


def input_window(panel: MonthlyPanel, end_row: int, W: int, graph) -> SnapshotWindow:
    """The W months ending at ``end_row`` (inclusive) with no targets attached."""
    feats, first = node_features(panel, graph.node_ids, graph.index_lags())
    start = end_row - W + 1
    if start < first:
        raise RecurrentError("not enough history for an input window")
    return SnapshotWindow(feats[start:end_row + 1].copy(), None, panel.months[end_row], [], start)


def rollout_forecast(window: SnapshotWindow, model: AttentionLSTM, edges: EdgeIndex, station_idx,
                     means=None, stds=None) -> np.ndarray:
    """Per-station H-vector forecast; rescaled to mm/month when ``means``/``stds`` are given."""
    if window.X.shape[0] != model.config.window:
        raise RecurrentError(f"window has {window.X.shape[0]} steps, model expects {model.config.window}")
    pred, _ = model.forward(window.X, edges, station_idx)
    if means is not None:
        pred = pred * np.asarray(stds)[:, None] + np.asarray(means)[:, None]
    return pred
