"""Station-to-grid interpolation and plain raster output (CSV + binary PPM)."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    resolution: float = 0.1

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        nx = int(round((self.lon_max - self.lon_min) / self.resolution)) + 1
        ny = int(round((self.lat_max - self.lat_min) / self.resolution)) + 1
        return (self.lon_min + self.resolution * np.arange(nx),
                self.lat_min + self.resolution * np.arange(ny))


@dataclass
class Raster:
    lon: np.ndarray     # (nx,)
    lat: np.ndarray     # (ny,)
    values: np.ndarray  # (ny, nx)


def idw_interpolate(lon, lat, values, grid: GridSpec, power: float = 2.0, eps: float = 1e-9) -> Raster:
    """Inverse-distance weighting in plain lon/lat degrees.

    A cell closer than ``eps`` to a station takes that station's value.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    values = np.asarray(values, dtype=float)
    if lon.size == 0:
        raise ValueError("no stations to interpolate from")
    if power <= 0:
        raise ValueError("IDW power must be positive")
    gx, gy = grid.axes()
    GX, GY = np.meshgrid(gx, gy)
    out = kernels.idw(lon, lat, values, GX.ravel(), GY.ravel(), power, eps)
    return Raster(gx, gy, out.reshape(GY.shape))


def write_raster_csv(r: Raster, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "value"])
        for j, la in enumerate(r.lat):
            for i, lo in enumerate(r.lon):
                w.writerow([repr(float(lo)), repr(float(la)), repr(float(r.values[j, i]))])


def read_raster_csv(path) -> Raster:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = np.array([[float(x) for x in row] for row in list(csv.reader(fh))[1:]])
    lon = np.unique(rows[:, 0])
    lat = np.unique(rows[:, 1])
    vals = np.empty((lat.size, lon.size))
    ix = np.searchsorted(lon, rows[:, 0])
    iy = np.searchsorted(lat, rows[:, 1])
    vals[iy, ix] = rows[:, 2]
    return Raster(lon, lat, vals)


def color_ramp(values: np.ndarray, low=(255, 255, 255), high=(8, 48, 160)) -> np.ndarray:
    """Linear two-colour ramp; a flat field maps to the low colour."""
    vmin, vmax = float(values.min()), float(values.max())
    t = np.zeros_like(values) if vmax == vmin else (values - vmin) / (vmax - vmin)
    lo = np.asarray(low, dtype=float)
    hi = np.asarray(high, dtype=float)
    return np.rint(lo + t[..., None] * (hi - lo)).astype(np.uint8)


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w, 3)


def render_map(r: Raster, prefix, palette: tuple | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>_min<v>_max<v>.ppm`` (north up)."""
    if not np.all(np.isfinite(r.values)):
        raise ValueError("raster has non-finite cells")
    prefix = Path(prefix)
    vmin, vmax = float(r.values.min()), float(r.values.max())
    if vmin == vmax:
        log.warning("flat raster (all cells %.6g); emitting a uniform image", vmin)
    csv_path = prefix.with_name(prefix.name + ".csv")
    write_raster_csv(r, csv_path)
    low, high = palette or ((255, 255, 255), (8, 48, 160))
    rgb = color_ramp(r.values[::-1], low, high)
    img_path = prefix.with_name(f"{prefix.name}_min{vmin:.3f}_max{vmax:.3f}.ppm")
    write_ppm(rgb, img_path)
    return csv_path, img_path
