"""Linear orographic precipitation on terrain grids and station edge features."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PhysicsError(ValueError):
    pass


@dataclass(frozen=True)
class OrographicConfig:
    Cw: float = 0.01      # condensation efficiency, kg m^-3
    tau_c: float = 0.0    # cloud -> hydrometeor conversion time, s
    tau_h: float = 0.0    # hydrometeor fallout time, s
    U: float = 0.0        # zonal wind, m/s
    V: float = 0.0        # meridional wind, m/s
    dx: float = 1000.0    # m
    dy: float = 1000.0    # m

    def __post_init__(self):
        if self.Cw <= 0:
            raise PhysicsError("Cw must be positive")
        if self.tau_c < 0 or self.tau_h < 0:
            raise PhysicsError("time constants must be non-negative")
        if self.dx <= 0 or self.dy <= 0:
            raise PhysicsError("grid spacing must be positive")


@dataclass
class TerrainGrid:
    """Terrain heights in metres, indexed ``[y, x]``."""

    elevations: np.ndarray

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=float)
        if self.elevations.ndim != 2 or min(self.elevations.shape) < 2:
            raise PhysicsError("terrain must be a 2-D grid with nx, ny >= 2")
        if not np.all(np.isfinite(self.elevations)):
            raise PhysicsError("terrain contains non-finite values")

    @property
    def ny(self) -> int:
        return self.elevations.shape[0]

    @property
    def nx(self) -> int:
        return self.elevations.shape[1]


def wavenumbers(nx: int, ny: int, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """Angular wavenumbers ``2*pi*j/(n*d)`` with signed FFT ordering, as (k[x], l[y])."""
    k = 2.0 * np.pi * np.fft.fftfreq(nx, d=dx)
    l = 2.0 * np.pi * np.fft.fftfreq(ny, d=dy)
    return k, l


def transfer_function(k, l, cfg: OrographicConfig) -> np.ndarray:
    K, L = np.meshgrid(k, l)
    sigma = cfg.U * K + cfg.V * L
    return cfg.Cw * 1j * sigma / ((1.0 + 1j * sigma * cfg.tau_c) * (1.0 + 1j * sigma * cfg.tau_h))


def simulate_field(terrain: TerrainGrid, cfg: OrographicConfig, raw: bool = False) -> np.ndarray:
    """Precipitation field of the linear spectral model.

    Returns the clamped (non-negative) field, or the signed field with ``raw=True``.
    Units follow ``Cw * U * dh/dx``, i.e. kg m^-2 s^-1 for SI inputs.
    """
    h = terrain.elevations
    k, l = wavenumbers(terrain.nx, terrain.ny, cfg.dx, cfg.dy)
    P_hat = transfer_function(k, l, cfg) * np.fft.fft2(h)
    field = np.fft.ifft2(P_hat).real
    return field if raw else np.maximum(field, 0.0)


def station_edge_feature(elevation: float, winds, Cw: float = 0.01) -> float:
    """Static orographic flux proxy for one station.

    With instant conversion and fallout the spectral model reduces to
    ``Cw * (U dh/dx + V dh/dy)``; the slope is approximated by the station
    elevation, giving the wind-climatology mean of ``Cw * |wind| * h``.
    """
    if elevation is None or elevation < 0:
        raise PhysicsError(f"invalid station elevation {elevation}")
    w = np.asarray(winds, dtype=float).reshape(-1, 2)
    if w.shape[0] == 0:
        raise PhysicsError("empty wind series")
    speed = np.hypot(w[:, 0], w[:, 1])
    return max(float(np.mean(Cw * speed * elevation)), 0.0)


def station_edge_feature_series(elevation: float, winds, Cw: float = 0.01) -> np.ndarray:
    """Per-timestep variant of :func:`station_edge_feature` (off by default in the pipeline)."""
    w = np.asarray(winds, dtype=float).reshape(-1, 2)
    return np.maximum(Cw * np.hypot(w[:, 0], w[:, 1]) * elevation, 0.0)


def build_edge_feature_table(stations, winds: dict, Cw: float = 0.01) -> dict[str, float]:
    """One static scalar per station; ``winds`` maps station_id to an (n, 2) U/V array."""
    table = {}
    for st in stations:
        if st.station_id not in winds:
            raise PhysicsError(f"station {st.station_id} has no wind data")
        table[st.station_id] = station_edge_feature(st.elevation, winds[st.station_id], Cw)
    return table


def load_winds_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Rows ``station_id, year, month, u, v`` -> station_id -> (n, 2) array in time order."""
    rows: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["station_id"], []).append(
                ((int(row["year"]), int(row["month"])), float(row["u"]), float(row["v"])))
    return {sid: np.array([[u, v] for _, u, v in sorted(r)]) for sid, r in rows.items()}


def load_terrain(path: str | Path) -> tuple[TerrainGrid, float, float]:
    """Terrain from a CSV grid (``dx``/``dy`` in a ``.json`` sidecar) or a raw float64 blob + JSON header."""
    path = Path(path)
    if path.suffix == ".json":
        head = json.loads(path.read_text())
        blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        grid = blob.reshape(head["ny"], head["nx"])
        return TerrainGrid(grid), float(head["dx"]), float(head["dy"])
    grid = np.loadtxt(path, delimiter=",", ndmin=2)
    side = path.with_suffix(".json")
    head = json.loads(side.read_text()) if side.exists() else {"dx": 1000.0, "dy": 1000.0}
    return TerrainGrid(grid), float(head["dx"]), float(head["dy"])


def save_terrain(grid: TerrainGrid, path: str | Path, dx: float, dy: float) -> None:
    path = Path(path)
    head = {"nx": grid.nx, "ny": grid.ny, "dx": dx, "dy": dy}
    path.with_suffix(".json").write_text(json.dumps(head, sort_keys=True))
    grid.elevations.astype("<f8").tofile(path.with_suffix(".bin"))


def write_field_csv(field: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, field, delimiter=",", fmt="%.17g")
