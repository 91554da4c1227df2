"""Seeded synthetic teleconnection dataset used by the tests and the demo pipeline.

Two station groups (a southern one peaking in November and an inland one
peaking in August), each driven by one slowly varying climate index at a
lag, over 480 months. Rain is multiplicatively noisy so the seasonal tails
have something for the GPD fits to find.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .ingest import ClimateIndexSeries, StationRecord, month_range

START = (1985, 1)
N_MONTHS = 480

GROUPS = {
    # name: (lat, lon, peak month, driving index, lag, base mm/month)
    "A": (7.5, 99.8, 11, "NEI", 1, 180.0),
    "B": (17.5, 99.2, 8, "SWI", 2, 140.0),
}


def _ar1(rng, n, phi, burn=120):
    e = rng.normal(size=n + burn)
    x = np.zeros(n + burn)
    for t in range(1, n + burn):
        x[t] = phi * x[t - 1] + e[t]
    x = x[burn:]
    return (x - x.mean()) / x.std()


def make_dataset(seed: int = 0, n_months: int = N_MONTHS, stations_per_group: int = 4,
                 missing_fraction: float = 0.01):
    """Return ``(records, indices, winds)`` where winds maps station_id -> (n, 2) U/V."""
    rng = np.random.default_rng(seed)
    months = month_range(START, ((START[0] * 12 + n_months - 1) // 12, (n_months - 1) % 12 + 1))
    cal = np.array([m for _, m in months])
    anomalies = {"NEI": _ar1(rng, n_months, 0.85), "SWI": _ar1(rng, n_months, 0.8)}
    indices = []
    for name, peak in (("NEI", 11), ("SWI", 8)):
        seasonal = np.cos(2 * np.pi * (cal - peak) / 12)
        vals = 1.2 * seasonal + 0.8 * anomalies[name]
        indices.append(ClimateIndexSeries(name, {m: float(v) for m, v in zip(months, vals)}))

    records, winds = [], {}
    for g, (lat, lon, peak, driver, lag, base) in GROUPS.items():
        drive = np.zeros(n_months)
        drive[lag:] = anomalies[driver][:-lag]
        for k in range(stations_per_group):
            sid = f"{g}{k + 1:02d}"
            elev = float(rng.uniform(5, 900))
            amp = 0.8 + 0.1 * rng.random()
            mean = base * (1 + 0.3 * rng.random()) * (1 + elev / 2000)
            season = np.exp(amp * 1.6 * np.cos(2 * np.pi * (cal - peak) / 12))
            rain = mean * season * np.exp(0.35 * drive + 0.25 * rng.normal(size=n_months)) / 2.0
            rain = np.round(rain, 1)
            miss = rng.random(n_months) < missing_fraction
            vals = {m: (float("nan") if miss[t] else float(rain[t])) for t, m in enumerate(months)}
            records.append(StationRecord(sid, lat + rng.normal(0, 0.3), lon + rng.normal(0, 0.3), elev, vals))
            u = 4 + 3 * np.cos(2 * np.pi * (cal - peak) / 12) + rng.normal(0, 1, n_months)
            v = 2 * np.sin(2 * np.pi * cal / 12) + rng.normal(0, 1, n_months)
            winds[sid] = np.column_stack([u, v])
    return records, indices, winds


def bell_terrain(n: int = 64, dx: float = 2000.0, height: float = 2000.0, half_width: float = 10000.0):
    """Circular bell-shaped mountain centred on an ``n x n`` grid."""
    from .physics import TerrainGrid

    x = (np.arange(n) - n // 2) * dx
    X, Y = np.meshgrid(x, x)
    return TerrainGrid(height / (1.0 + (X**2 + Y**2) / half_width**2) ** 1.5)


def default_config(data_dir: str = ".", output_dir: str = "out", fast: bool = True) -> dict:
    """Pipeline config matched to :func:`make_dataset` (two folds, both clusters)."""
    return {
        "data": {"stations": f"{data_dir}/stations.csv", "indices": f"{data_dir}/indices.csv",
                 "winds": f"{data_dir}/winds.csv", "terrain": f"{data_dir}/terrain.json"},
        "period": None,
        "coverage_min_fraction": 0.8,
        "clustering": {"n_components": 3, "distance_d": 4.0},
        "screening": {"r_threshold": 0.4, "alpha": 0.1, "max_lag": 3, "extreme_percentile": None,
                      "forced": {}},
        "physics": {"Cw": 0.01, "tau_c": 0.0, "tau_h": 0.0},
        "training": {
            "base": {"heads": 8, "hidden": 32, "layers": 1, "dropout": 0.0, "lr": 0.01, "delta": 1.0,
                     "max_epochs": 4 if fast else 200, "patience": 50, "window": 24, "horizon": 12},
            "grid": {},
            "objective": "accuracy",
        },
        "evt": {"Q": 90.0, "enabled_seasons": None, "families": {"2": "inland"}},
        "folds": [
            {"train": [[1985, 1], [2020, 12]], "val": [[2021, 1], [2021, 12]], "test": [[2022, 1], [2022, 12]]},
            {"train": [[1985, 1], [2022, 12]], "val": [[2023, 1], [2023, 12]], "test": [[2024, 1], [2024, 12]]},
        ],
        "map": {"grid": {"lon_min": 97.5, "lon_max": 101.5, "lat_min": 6.0, "lat_max": 19.0,
                         "resolution": 0.1}, "power": 2.0, "horizon": 1},
        "seed": 0,
        "output_dir": output_dir,
    }


def write_dataset(directory, seed: int = 0, fast: bool = True) -> Path:
    """Write stations/indices/winds CSVs plus ``config.json``; returns the config path."""
    from .ingest import write_station_csv
    from .physics import save_terrain

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records, indices, winds = make_dataset(seed)
    write_station_csv(records, d / "stations.csv")
    months = list(indices[0].values)
    with open(d / "indices.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "month", *[ix.name for ix in indices]])
        for m in months:
            w.writerow([m[0], m[1], *[repr(ix.values[m]) for ix in indices]])
    with open(d / "winds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "year", "month", "u", "v"])
        for r in records:
            for (y, m), (u, v) in zip(months, winds[r.station_id]):
                w.writerow([r.station_id, y, m, repr(float(u)), repr(float(v))])
    save_terrain(bell_terrain(), d / "terrain.json", 2000.0, 2000.0)
    cfg = default_config(".", "out", fast=fast)
    path = d / "config.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return path
