"""Robust-loss training loop, early stopping, grid search and fold protocol."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics as M
from .gat import EdgeIndex
from .ingest import Month, month_index
from .recurrent import AttentionLSTM, ModelConfig, SnapshotWindow

log = logging.getLogger(__name__)

HEADS_GRID = (1, 4, 8, 16)
HIDDEN_GRID = (16, 32, 64)
LAYERS_GRID = (1, 2, 3)
DROPOUT_GRID = (0.0, 0.2, 0.5)


class TrainingDiverged(RuntimeError):
    def __init__(self, report: "TrainReport"):
        super().__init__(f"non-finite loss at epoch {report.epochs[-1]['epoch'] if report.epochs else 0}")
        self.report = report


def adaptive_huber(pred, truth, delta: float = 1.0):
    """Mean Huber loss and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("non-finite input to the loss")
    r = pred - truth
    a = np.abs(r)
    quad = a <= delta
    per = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = r.size
    grad = np.where(quad, r, delta * np.sign(r)) / n
    return float(per.sum() / n), grad


@dataclass
class Hyperparams:
    heads: int = 8
    hidden: int = 32
    layers: int = 1
    dropout: float = 0.0
    lr: float = 0.01
    delta: float = 1.0
    max_epochs: int = 200
    patience: int = 50
    optimizer: str = "adam"
    clip_norm: float = 5.0
    edge_dim: int = 4
    window: int = 24
    horizon: int = 12

    def __post_init__(self):
        if self.lr <= 0 or self.delta <= 0:
            raise ValueError("lr and delta must be positive")
        if self.heads < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError("heads, hidden and layers must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.optimizer not in {"adam", "sgd"}:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def model_config(self, n_nodes: int) -> ModelConfig:
        return ModelConfig(n_nodes=n_nodes, hidden=self.hidden, heads=self.heads, layers=self.layers,
                           window=self.window, horizon=self.horizon, edge_dim=self.edge_dim,
                           dropout=self.dropout)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k, p in params.items():
            p -= self.lr * grads[k]


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> bool:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
        return True
    return False


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopping_reason: str = ""
    final_metrics: dict = field(default_factory=dict)

    def to_json(self, include_timing: bool = True) -> str:
        d = asdict(self)
        if not include_timing:
            for e in d["epochs"]:
                e.pop("seconds", None)
        return json.dumps(d, sort_keys=True, indent=1)


@dataclass
class ClusterData:
    """Everything one cluster's training needs besides hyperparameters."""

    edges: EdgeIndex
    station_idx: np.ndarray
    means: np.ndarray | None = None  # per-station, mm/month
    stds: np.ndarray | None = None

    @classmethod
    def from_graph(cls, graph, norm=None) -> "ClusterData":
        edges = EdgeIndex.from_graph(graph)
        sidx = np.array([i for i, (_, k) in enumerate(graph.nodes) if k == "station"], dtype=np.int64)
        means = stds = None
        if norm is not None:
            means = np.array([1.0 * norm.mean[s] for s in graph.stations])
            stds = np.array([1.0 if s in norm.flagged else norm.std[s] for s in graph.stations])
        return cls(edges, sidx, means, stds)

    def to_mm(self, values: np.ndarray) -> np.ndarray:
        if self.means is None:
            return values
        return values * self.stds[:, None] + self.means[:, None]


def evaluate_loss(model: AttentionLSTM, data: ClusterData, windows, delta: float) -> float:
    losses = [adaptive_huber(model.forward(w.X, data.edges, data.station_idx)[0], w.Y, delta)[0]
              for w in windows]
    return float(np.mean(losses))


def predict_windows(model: AttentionLSTM, data: ClusterData, windows) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (n_windows, S, H) predictions and targets, in mm/month when scales are known."""
    preds = np.stack([data.to_mm(model.forward(w.X, data.edges, data.station_idx)[0]) for w in windows])
    obs = np.stack([data.to_mm(w.Y) for w in windows])
    return preds, obs


def validation_metrics(model, data, windows) -> dict:
    pred, obs = predict_windows(model, data, windows)
    return M.summary(obs, pred)


def train_cluster(data: ClusterData, windows: list[SnapshotWindow], hp: Hyperparams,
                  val_windows: list[SnapshotWindow], seed: int = 0,
                  n_nodes: int | None = None) -> tuple[AttentionLSTM, TrainReport]:
    """Train on shuffled single-snapshot steps; return the best-validation model."""
    if not windows or not val_windows:
        raise ValueError("train and validation window sets must be non-empty")
    n_nodes = n_nodes or data.edges.n_nodes
    model = AttentionLSTM.init(hp.model_config(n_nodes), seed=seed)
    params = model.params()
    opt = Adam(params, hp.lr) if hp.optimizer == "adam" else SGD(params, hp.lr)
    rng = np.random.default_rng(seed)
    report = TrainReport()
    best_params = model.copy_params()
    wait = 0
    for epoch in range(hp.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(windows))
        total = 0.0
        clipped = 0
        for k in order:
            w = windows[k]
            pred, cache = model.forward(w.X, data.edges, data.station_idx, train=True, rng=rng)
            if not np.all(np.isfinite(pred)):
                report.epochs.append({"epoch": epoch, "train_loss": math.nan, "val_loss": math.nan,
                                      "clipped": clipped, "seconds": time.perf_counter() - t0})
                report.stopping_reason = "diverged"
                model.set_params(best_params)
                raise TrainingDiverged(report)
            loss, dpred = adaptive_huber(pred, w.Y, hp.delta)
            grads = model.backward(dpred, cache, data.edges)
            if clip_global_norm(grads, hp.clip_norm):
                clipped += 1
            opt.step(params, grads)
            total += loss
        val = evaluate_loss(model, data, val_windows, hp.delta)
        if clipped:
            log.debug("epoch %d: gradient clipping active on %d steps", epoch, clipped)
        report.epochs.append({"epoch": epoch, "train_loss": total / len(windows), "val_loss": val,
                              "clipped": clipped, "seconds": time.perf_counter() - t0})
        if not math.isfinite(val):
            report.stopping_reason = "diverged"
            model.set_params(best_params)
            raise TrainingDiverged(report)
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best_params = model.copy_params()
            wait = 0
        else:
            wait += 1
            if wait > hp.patience:
                report.stopping_reason = "early_stopping"
                break
    else:
        report.stopping_reason = "max_epochs"
    model.set_params(best_params)
    report.final_metrics = validation_metrics(model, data, val_windows)
    return model, report


# -- grid search ---------------------------------------------------------------

OBJECTIVES = {"accuracy": True, "nse": True, "rmse": False}  # name -> higher is better


def expand_grid(base: Hyperparams, grid: dict[str, list]) -> list[Hyperparams]:
    if not grid:
        return [base]
    names = sorted(grid)
    if any(len(grid[n]) == 0 for n in names):
        raise ValueError("grid dimensions must be non-empty")
    return [replace(base, **dict(zip(names, combo))) for combo in itertools.product(*(grid[n] for n in names))]


def default_search_grid() -> dict[str, list]:
    return {"heads": list(HEADS_GRID), "hidden": list(HIDDEN_GRID), "layers": list(LAYERS_GRID),
            "dropout": list(DROPOUT_GRID)}


@dataclass
class FoldData:
    train: list[SnapshotWindow]
    val: list[SnapshotWindow]
    test: list[SnapshotWindow] = field(default_factory=list)


def grid_search(data: ClusterData, folds: list[FoldData], base: Hyperparams, grid: dict[str, list],
                objective: str = "accuracy", seed: int = 0, n_jobs: int = 1):
    """Train every grid point on every fold and rank by the validation objective.

    Returns ``(best Hyperparams, leaderboard rows)``; rows of aborted
    combinations carry an ``error`` entry and sort last.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    combos = expand_grid(base, grid)
    if not combos:
        raise ValueError("empty grid")

    def run(hp):
        row = {k: getattr(hp, k) for k in ("heads", "hidden", "layers", "dropout", "lr")}
        try:
            scores = []
            for fold in folds:
                _model, rep = train_cluster(data, fold.train, hp, fold.val, seed=seed)
                scores.append(rep.final_metrics)
            for m in ("accuracy", "rmse", "nse", "smape"):
                row[m] = float(np.mean([s[m] for s in scores]))
            row["error"] = ""
        except (TrainingDiverged, FloatingPointError, ValueError) as exc:
            row.update({m: math.nan for m in ("accuracy", "rmse", "nse", "smape")})
            row["error"] = str(exc) or type(exc).__name__
        return hp, row

    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(run, combos))
    else:
        results = [run(hp) for hp in combos]

    higher = OBJECTIVES[objective]

    def key(item):
        v = item[1][objective]
        if math.isnan(v):
            return (1, 0.0)
        return (0, -v if higher else v)

    results.sort(key=key)
    if all(math.isnan(r[objective]) for _, r in results):
        raise RuntimeError("every grid combination failed")
    return results[0][0], [r for _, r in results]


def write_leaderboard(rows: list[dict], path) -> None:
    cols = ["heads", "hidden", "layers", "dropout", "lr", "accuracy", "rmse", "nse", "smape", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols})


# -- fold protocol ---------------------------------------------------------------


@dataclass
class FoldSpec:
    train: tuple[Month, Month]
    val: tuple[Month, Month]
    test: tuple[Month, Month]

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        conv = lambda span: (tuple(span[0]), tuple(span[1]))  # noqa: E731
        return cls(conv(d["train"]), conv(d["val"]), conv(d["test"]))


@dataclass
class FoldRows:
    train: tuple[int, int]  # half-open panel row ranges
    val: tuple[int, int]
    test: tuple[int, int]

    def sizes(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in (self.train, self.val, self.test))


def two_fold_protocol(months: list[Month], folds: list[FoldSpec]) -> list[FoldRows]:
    """Map each fold's (train, val, test) month spans to panel row ranges."""
    first = month_index(months[0])
    last = month_index(months[-1])
    out = []
    for spec in folds:
        rows = []
        for name in ("train", "val", "test"):
            a, b = (month_index(m) for m in getattr(spec, name))
            if b < a:
                raise ValueError(f"empty {name} span")
            if a < first or b > last:
                raise ValueError(f"{name} span not covered by the panel")
            rows.append((a - first, b - first + 1))
        (tr, va, te) = rows
        if not (tr[1] <= va[0] and va[1] <= te[0]):
            raise ValueError("fold spans overlap or are out of chronological order")
        out.append(FoldRows(tr, va, te))
    return out


def average_folds(per_fold: list[dict]) -> dict:
    keys = per_fold[0].keys()
    return {k: float(np.mean([m[k] for m in per_fold])) for k in keys}
