"""Station and climate-index loading, QC, imputation and panel assembly."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Month = tuple[int, int]


class IngestError(ValueError):
    pass


def month_index(ym: Month) -> int:
    return ym[0] * 12 + (ym[1] - 1)


def month_from_index(k: int) -> Month:
    return (k // 12, k % 12 + 1)


def month_range(start: Month, stop: Month) -> list[Month]:
    """Inclusive range of (year, month) pairs."""
    return [month_from_index(k) for k in range(month_index(start), month_index(stop) + 1)]


@dataclass
class StationRecord:
    station_id: str
    lat: float | None = None
    lon: float | None = None
    elevation: float | None = None
    # (year, month) -> mm/month, nan where missing; keys kept sorted
    rainfall: dict[Month, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lat is not None and not -90.0 <= self.lat <= 90.0:
            raise IngestError(f"{self.station_id}: latitude {self.lat} out of range")
        if self.lon is not None and not -180.0 <= self.lon <= 180.0:
            raise IngestError(f"{self.station_id}: longitude {self.lon} out of range")
        if self.elevation is not None and self.elevation < 0:
            raise IngestError(f"{self.station_id}: negative elevation {self.elevation}")
        for ym, v in self.rainfall.items():
            if not math.isnan(v) and v < 0:
                raise IngestError(f"{self.station_id}: negative rainfall {v} at {ym}")
        self.rainfall = dict(sorted(self.rainfall.items()))

    @property
    def months(self) -> list[Month]:
        return list(self.rainfall)

    def span(self) -> tuple[Month, Month]:
        keys = list(self.rainfall)
        return keys[0], keys[-1]

    def values(self, months: list[Month]) -> np.ndarray:
        return np.array([self.rainfall.get(m, np.nan) for m in months], dtype=float)


@dataclass
class ClimateIndexSeries:
    name: str
    values: dict[Month, float]
    cadence: str = "monthly"

    def __post_init__(self):
        if self.cadence not in {"monthly", "daily-reduced-to-monthly"}:
            raise IngestError(f"index {self.name}: unknown cadence {self.cadence!r}")
        self.values = dict(sorted(self.values.items()))

    def span(self) -> tuple[Month, Month]:
        keys = list(self.values)
        return keys[0], keys[-1]


def _parse_float(text: str, what: str, lineno: int) -> float:
    text = text.strip()
    if text == "" or text.lower() in {"na", "nan"}:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"line {lineno}: malformed {what} {text!r}") from None


def _parse_month_header(col: str) -> Month | None:
    parts = col.strip().split("-")
    if len(parts) != 2:
        return None
    try:
        y, m = int(parts[0]), int(parts[1])
    except ValueError:
        return None
    return (y, m) if 1 <= m <= 12 else None


def load_station_metadata(path: str | Path) -> dict[str, tuple[float, float, float]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            sid = row["station_id"].strip()
            coords = tuple(
                _parse_float(row[k], k, lineno) for k in ("lat", "lon", "elevation_m")
            )
            if any(math.isnan(c) for c in coords):
                raise IngestError(f"line {lineno}: malformed coordinates for {sid}")
            out[sid] = coords
    return out


def load_station_csv(path: str | Path, metadata: str | Path | None = None) -> list[StationRecord]:
    """Read station rainfall in long or wide layout.

    Long rows are ``station_id, year, month, rain_mm`` with optional
    ``lat, lon, elevation_m`` columns. Wide rows are ``station_id, lat, lon,
    elevation_m`` followed by one ``YYYY-MM`` column per month. Empty cells
    become NaN. Coordinates can instead come from a separate metadata file.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = list(enumerate(reader, start=2))

    meta = load_station_metadata(metadata) if metadata else {}
    coords: dict[str, tuple[float, float, float]] = {}
    rain: dict[str, dict[Month, float]] = defaultdict(dict)
    order: list[str] = []

    def note_coords(sid, lat, lon, elev, lineno):
        if any(math.isnan(c) for c in (lat, lon, elev)):
            raise IngestError(f"line {lineno}: malformed coordinates for {sid}")
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise IngestError(f"line {lineno}: coordinates out of range for {sid}")
        prev = coords.setdefault(sid, (lat, lon, elev))
        if prev != (lat, lon, elev):
            raise IngestError(f"line {lineno}: inconsistent coordinates for {sid}")

    if {"year", "month", "rain_mm"} <= set(header):
        col = {h: i for i, h in enumerate(header)}
        has_coords = {"lat", "lon", "elevation_m"} <= set(header)
        for lineno, row in rows:
            if not row:
                continue
            sid = row[col["station_id"]].strip()
            try:
                ym = (int(row[col["year"]]), int(row[col["month"]]))
            except ValueError:
                raise IngestError(f"line {lineno}: malformed year/month") from None
            if not 1 <= ym[1] <= 12:
                raise IngestError(f"line {lineno}: month {ym[1]} out of range")
            if has_coords:
                note_coords(
                    sid,
                    *(_parse_float(row[col[k]], k, lineno) for k in ("lat", "lon", "elevation_m")),
                    lineno,
                )
            v = _parse_float(row[col["rain_mm"]], "rain_mm", lineno)
            if not math.isnan(v) and v < 0:
                raise IngestError(f"line {lineno}: negative rainfall {v} for {sid}")
            if sid not in rain:
                order.append(sid)
            if ym in rain[sid]:
                raise IngestError(f"line {lineno}: duplicate month {ym[0]}-{ym[1]:02d} for {sid}")
            rain[sid][ym] = v
    else:
        expected = ["station_id", "lat", "lon", "elevation_m"]
        if header[:4] != expected:
            raise IngestError(f"{path}: header must start with {','.join(expected)}")
        months = []
        for h in header[4:]:
            ym = _parse_month_header(h)
            if ym is None:
                raise IngestError(f"{path}: bad month column {h!r}")
            if ym in months:
                raise IngestError(f"{path}: duplicate month column {h}")
            months.append(ym)
        for lineno, row in rows:
            if not row:
                continue
            sid = row[0].strip()
            if sid in rain:
                raise IngestError(f"line {lineno}: duplicate station {sid}")
            note_coords(sid, *(_parse_float(row[k], h, lineno) for k, h in enumerate(expected[1:], 1)), lineno)
            order.append(sid)
            for ym, cell in zip(months, row[4:]):
                v = _parse_float(cell, "rain_mm", lineno)
                if not math.isnan(v) and v < 0:
                    raise IngestError(f"line {lineno}: negative rainfall {v} for {sid}")
                rain[sid][ym] = v

    records = []
    for sid in order:
        lat = lon = elev = None
        if sid in meta:
            lat, lon, elev = meta[sid]
        elif sid in coords:
            lat, lon, elev = coords[sid]
        records.append(StationRecord(sid, lat, lon, elev, rain[sid]))
    return records


def write_station_csv(records: list[StationRecord], path: str | Path) -> None:
    """Emit the canonical long layout (coordinates repeated on every row)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "lat", "lon", "elevation_m", "year", "month", "rain_mm"])
        for r in records:
            for (y, m), v in r.rainfall.items():
                w.writerow([r.station_id, repr(r.lat), repr(r.lon), repr(r.elevation), y, m,
                            "" if math.isnan(v) else repr(v)])


def monthly_max_amplitude(daily: dict[tuple[int, int, int], float]) -> dict[Month, float]:
    """Reduce a daily series to monthly values of maximal absolute magnitude.

    The sign of the attaining day is kept; on ties the earliest day wins.
    """
    buckets: dict[Month, list[tuple[int, float]]] = defaultdict(list)
    for (y, m, d), v in daily.items():
        if not math.isnan(v):
            buckets[(y, m)].append((d, v))
    if not buckets:
        raise IngestError("daily series has no values")
    months = sorted({(y, m) for (y, m, _d) in daily})
    out = {}
    for ym in months:
        vals = sorted(buckets.get(ym, []))
        if not vals:
            raise IngestError(f"month {ym[0]}-{ym[1]:02d} has no daily values")
        best = vals[0][1]
        for _d, v in vals[1:]:
            if abs(v) > abs(best):
                best = v
        out[ym] = best
    return out


def load_index_csv(path: str | Path) -> list[ClimateIndexSeries]:
    """Read climate indices in wide layout ``year, month[, day], NAME1, NAME2, ...``.

    A ``day`` column marks daily cadence; such series are reduced with
    :func:`monthly_max_amplitude`.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = list(enumerate(reader, start=2))
    daily = len(header) > 2 and header[2] == "day"
    keys = 3 if daily else 2
    if header[:2] != ["year", "month"]:
        raise IngestError(f"{path}: header must start with year,month")
    names = header[keys:]
    data: dict[str, dict] = {n: {} for n in names}
    for lineno, row in rows:
        if not row:
            continue
        try:
            stamp = tuple(int(row[k]) for k in range(keys))
        except ValueError:
            raise IngestError(f"line {lineno}: malformed date") from None
        for n, cell in zip(names, row[keys:]):
            if stamp in data[n]:
                raise IngestError(f"line {lineno}: duplicate date for {n}")
            data[n][stamp] = _parse_float(cell, n, lineno)
    out = []
    for n in names:
        if daily:
            out.append(ClimateIndexSeries(n, monthly_max_amplitude(data[n]), "daily-reduced-to-monthly"))
        else:
            out.append(ClimateIndexSeries(n, data[n]))
    return out


def coverage_filter(records: list[StationRecord], min_fraction: float,
                    period: tuple[Month, Month] | None = None) -> list[StationRecord]:
    """Keep stations whose reporting fraction is >= ``min_fraction`` in every calendar month.

    The study period defaults to the union span of all records.
    """
    if not records:
        raise IngestError("coverage_filter: no records")
    if not 0.0 <= min_fraction <= 1.0:
        raise IngestError(f"min_fraction must lie in [0, 1], got {min_fraction}")
    if period is None:
        starts, stops = zip(*(r.span() for r in records if r.rainfall))
        period = (min(starts), max(stops))
    months = month_range(*period)
    kept = []
    for r in records:
        present = np.zeros(12)
        total = np.zeros(12)
        for ym in months:
            total[ym[1] - 1] += 1
            v = r.rainfall.get(ym, math.nan)
            if not math.isnan(v):
                present[ym[1] - 1] += 1
        frac = np.divide(present, total, out=np.ones(12), where=total > 0)
        if np.all(frac >= min_fraction):
            kept.append(r)
    return kept


def median_impute(record: StationRecord) -> StationRecord:
    """Fill missing months with the station's median for that calendar month."""
    by_month: dict[int, list[float]] = defaultdict(list)
    for (_, m), v in record.rainfall.items():
        if not math.isnan(v):
            by_month[m].append(v)
    filled = {}
    for ym, v in record.rainfall.items():
        if math.isnan(v):
            obs = by_month.get(ym[1])
            if not obs:
                raise IngestError(f"{record.station_id}: calendar month {ym[1]} has no observations")
            v = float(np.median(obs))
        filled[ym] = v
    return StationRecord(record.station_id, record.lat, record.lon, record.elevation, filled)


@dataclass
class Normalization:
    mean: dict[str, float]
    std: dict[str, float]
    flagged: list[str]

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std, "flagged": self.flagged},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Normalization":
        d = json.loads(text)
        return cls(d["mean"], d["std"], d["flagged"])

    def scale(self, name: str, values):
        if name in self.flagged:
            return np.asarray(values, dtype=float)
        return (np.asarray(values, dtype=float) - self.mean[name]) / self.std[name]

    def unscale(self, name: str, values):
        if name in self.flagged:
            return np.asarray(values, dtype=float)
        return np.asarray(values, dtype=float) * self.std[name] + self.mean[name]


@dataclass
class MonthlyPanel:
    months: list[Month]
    stations: list[str]
    indices: list[str]
    rain: np.ndarray   # (T, S), scaled if normalized
    index: np.ndarray  # (T, I), scaled if normalized
    embed: np.ndarray  # (T, 2) sin/cos of calendar month
    norm: Normalization | None = None

    def __len__(self):
        return len(self.months)

    def column(self, name: str) -> np.ndarray:
        if name in self.stations:
            return self.rain[:, self.stations.index(name)]
        return self.index[:, self.indices.index(name)]

    def raw_rain(self) -> np.ndarray:
        if self.norm is None:
            return self.rain.copy()
        return np.column_stack([self.norm.unscale(s, self.rain[:, k])
                                for k, s in enumerate(self.stations)]) if self.stations else self.rain.copy()

    def raw_index(self) -> np.ndarray:
        if self.norm is None:
            return self.index.copy()
        return np.column_stack([self.norm.unscale(n, self.index[:, k])
                                for k, n in enumerate(self.indices)]) if self.indices else self.index.copy()

    def slice(self, start: int, stop: int) -> "MonthlyPanel":
        return MonthlyPanel(self.months[start:stop], self.stations, self.indices,
                            self.rain[start:stop], self.index[start:stop], self.embed[start:stop], self.norm)


def time_embedding(months: list[Month]) -> np.ndarray:
    t = np.array([m for _, m in months], dtype=float)
    ang = 2.0 * np.pi * t / 12.0
    return np.column_stack([np.sin(ang), np.cos(ang)])


def build_panel(records: list[StationRecord], indices: list[ClimateIndexSeries],
                normalize: bool = True, period: tuple[Month, Month] | None = None,
                norm: Normalization | None = None) -> MonthlyPanel:
    """Align stations and indices on their common monthly span.

    With ``normalize`` every column is z-scored; zero-variance columns are
    flagged and left as they are. Passing ``norm`` reuses existing statistics.
    """
    spans = [r.span() for r in records] + [ix.span() for ix in indices]
    if not spans:
        raise IngestError("build_panel: nothing to align")
    start = max(s for s, _ in spans)
    stop = min(e for _, e in spans)
    if period is not None:
        start, stop = max(start, period[0]), min(stop, period[1])
    if month_index(start) > month_index(stop):
        raise IngestError("build_panel: empty intersection span")
    months = month_range(start, stop)
    rain = np.column_stack([r.values(months) for r in records]) if records else np.zeros((len(months), 0))
    idx = (np.column_stack([np.array([ix.values.get(m, np.nan) for m in months]) for ix in indices])
           if indices else np.zeros((len(months), 0)))
    if np.isnan(rain).any():
        raise IngestError("build_panel: station rainfall has gaps; impute first")
    if np.isnan(idx).any():
        raise IngestError("build_panel: index series has gaps inside the span")
    stations = [r.station_id for r in records]
    names = [ix.name for ix in indices]
    if normalize:
        if norm is None:
            mean, std, flagged = {}, {}, []
            for name, col in zip(stations + names, np.column_stack([rain, idx]).T):
                mu, sd = float(col.mean()), float(col.std())
                mean[name], std[name] = mu, sd
                if sd == 0.0:
                    flagged.append(name)
            norm = Normalization(mean, std, flagged)
        rain = np.column_stack([norm.scale(s, rain[:, k]) for k, s in enumerate(stations)]) if stations else rain
        idx = np.column_stack([norm.scale(n, idx[:, k]) for k, n in enumerate(names)]) if names else idx
    else:
        norm = None
    return MonthlyPanel(months, stations, names, rain, idx, time_embedding(months), norm)
