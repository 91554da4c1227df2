"""Point-forecast skill scores and their station/horizon/cluster aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _pair(obs, pred):
    obs = np.asarray(obs, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    if obs.size == 0:
        raise MetricError("empty input")
    if obs.shape != pred.shape:
        raise MetricError("obs and pred lengths differ")
    return obs, pred


def rmse(obs, pred) -> float:
    obs, pred = _pair(obs, pred)
    return float(np.sqrt(np.mean((obs - pred) ** 2)))


def mape(obs, pred) -> float:
    obs, pred = _pair(obs, pred)
    if np.any(obs <= 0):
        raise MetricError("MAPE needs strictly positive observations")
    return float(np.mean(np.abs(obs - pred) / obs) * 100.0)


def smape(obs, pred) -> float:
    """Mean of 2|y - yhat| / (|y| + |yhat|) in percent; 0/0 terms count as perfect."""
    obs, pred = _pair(obs, pred)
    den = np.abs(obs) + np.abs(pred)
    if np.all(den == 0):
        raise MetricError("SMAPE undefined: every term is 0/0")
    terms = np.divide(2.0 * np.abs(obs - pred), den, out=np.zeros_like(den), where=den > 0)
    return float(terms.mean() * 100.0)


def accuracy(obs, pred, return_kind: bool = False):
    """100 - MAPE when every observation is positive, else 100 - SMAPE."""
    obs, pred = _pair(obs, pred)
    if np.all(obs > 0):
        val, kind = 100.0 - mape(obs, pred), "mape"
    else:
        val, kind = 100.0 - smape(obs, pred), "smape"
    return (val, kind) if return_kind else val


def nse(obs, pred, obs_mean: float | None = None) -> float:
    obs, pred = _pair(obs, pred)
    mu = obs.mean() if obs_mean is None else obs_mean
    den = float(np.sum((obs - mu) ** 2))
    if den == 0:
        raise MetricError("NSE undefined for zero-variance observations")
    return 1.0 - float(np.sum((obs - pred) ** 2)) / den


@dataclass
class EvalTable:
    """Per (station, horizon) cells plus per-station NSE; aggregates are plain means."""

    cells: dict[tuple[str, int], dict] = field(default_factory=dict)
    station_nse: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {}
        for m in ("rmse", "accuracy", "smape"):
            out[m] = float(np.mean([c[m] for c in self.cells.values()]))
        vals = [v for v in self.station_nse.values() if not math.isnan(v)]
        out["nse"] = float(np.mean(vals)) if vals else math.nan
        return out


def eval_table(obs, pred, stations: list[str]) -> EvalTable:
    """Score (n_windows, S, H) arrays.

    Cells pool over windows for each (station, horizon). NSE is computed per
    station over all its windows and horizons against that station's mean.
    """
    obs = np.asarray(obs, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if obs.shape != pred.shape or obs.ndim != 3:
        raise MetricError("expected matching (n_windows, S, H) arrays")
    _, S, H = obs.shape
    table = EvalTable()
    for s, sid in enumerate(stations):
        for h in range(H):
            o, p = obs[:, s, h], pred[:, s, h]
            acc, kind = accuracy(o, p, return_kind=True)
            table.cells[(sid, h + 1)] = {"rmse": rmse(o, p), "accuracy": acc, "accuracy_kind": kind,
                                         "smape": smape(o, p), "count": int(o.size)}
        try:
            table.station_nse[sid] = nse(obs[:, s, :], pred[:, s, :])
        except MetricError:
            table.station_nse[sid] = math.nan
    return table


def summary(obs, pred) -> dict:
    S = np.asarray(obs).shape[1]
    return eval_table(obs, pred, [str(i) for i in range(S)]).aggregate()


def write_eval_rows(rows: list[dict], variants: list[str], path) -> None:
    """CSV rows ``cluster, metric, <variant...>``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "metric", *variants])
        for r in rows:
            w.writerow([r["cluster"], r["metric"], *(repr(float(r[v])) for v in variants)])
