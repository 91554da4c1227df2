"""Season-aware peaks-over-threshold fitting and GPD tail mapping of forecasts."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import kernels
from .ingest import Month

log = logging.getLogger(__name__)

XI_ZERO = 1e-9
XI_BOUNDS = (-0.99, 2.0)
P_MAX = 1.0 - 1e-6
MIN_EXCEEDANCES = 10

SOUTH_SEASONS = {"SW-monsoon": (5, 6, 7, 8, 9), "NE-monsoon": (10, 11, 12), "dry": (1, 2, 3, 4)}
INLAND_SEASONS = {"onset": (3, 4, 5), "peak": (6, 7, 8, 9, 10), "dry": (11, 12, 1, 2)}
WET_SEASONS = ("SW-monsoon", "NE-monsoon", "onset", "peak")


class EvtError(ValueError):
    pass


@dataclass
class SeasonCalendar:
    """Calendar month -> season label for each cluster.

    Clusters 1-4 use the southern monsoon calendar and every other cluster the
    inland one, unless ``families`` pins a cluster to ``"south"``/``"inland"``.
    """

    families: dict[int, str] = field(default_factory=dict)

    def family(self, cluster_id: int) -> str:
        if cluster_id in self.families:
            fam = self.families[cluster_id]
        elif cluster_id >= 1:
            fam = "south" if cluster_id <= 4 else "inland"
        else:
            raise EvtError(f"no season family for cluster {cluster_id}")
        if fam not in ("south", "inland"):
            raise EvtError(f"unknown season family {fam!r}")
        return fam

    def seasons(self, cluster_id: int) -> dict[str, tuple[int, ...]]:
        return SOUTH_SEASONS if self.family(cluster_id) == "south" else INLAND_SEASONS

    def season_of(self, cluster_id: int, month: int) -> str:
        for name, months in self.seasons(cluster_id).items():
            if month in months:
                return name
        raise EvtError(f"month {month} not in calendar")


# -- distribution -----------------------------------------------------------------


def _check_scale(scale):
    if not scale > 0:
        raise EvtError(f"scale must be positive, got {scale}")


def support_end(xi: float, scale: float) -> float:
    return -scale / xi if xi < -XI_ZERO else math.inf


def gpd_cdf(excess, xi: float, scale: float):
    """P(Y - u <= excess | Y > u) for the generalised Pareto law."""
    _check_scale(scale)
    y = np.asarray(excess, dtype=float)
    if np.any(y < 0):
        raise EvtError("excess must be non-negative")
    end = support_end(xi, scale)
    if np.any(y > end * (1 + 1e-12)):
        raise EvtError(f"excess beyond the support end {end}")
    if abs(xi) < XI_ZERO:
        p = -np.expm1(-y / scale)
    else:
        arg = np.maximum(xi * y / scale, -1.0)
        with np.errstate(divide="ignore"):
            p = -np.expm1(-np.log1p(arg) / xi)
    return p if p.ndim else float(p)


def gpd_quantile(p, xi: float, scale: float):
    """Inverse of :func:`gpd_cdf`."""
    _check_scale(scale)
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise EvtError("probability outside [0, 1]")
    if np.any(p == 1) and xi > -XI_ZERO:
        raise EvtError("p = 1 has an infinite quantile for xi >= 0")
    with np.errstate(divide="ignore"):
        if abs(xi) < XI_ZERO:
            x = -scale * np.log1p(-p)
        else:
            x = scale * np.expm1(-xi * np.log1p(-p)) / xi
    return x if x.ndim else float(x)


def gpd_loglik(excess, xi: float, scale: float) -> float:
    y = np.asarray(excess, dtype=float)
    n = y.size
    if scale <= 0:
        return -math.inf
    if abs(xi) < XI_ZERO:
        return float(-n * math.log(scale) - y.sum() / scale)
    arg = 1.0 + xi * y / scale
    if np.any(arg <= 0):
        return -math.inf
    return float(-n * math.log(scale) - (1.0 + 1.0 / xi) * np.log(arg).sum())


# -- fitting -----------------------------------------------------------------------


@dataclass
class MleResult:
    xi: float
    scale: float
    loglik: float
    converged: bool
    at_bound: bool


def _xi_of_theta(z, theta):
    return float(np.mean(np.log1p(theta * z)))


def fit_gpd_mle(excesses, min_exceedances: int = MIN_EXCEEDANCES) -> MleResult:
    """Maximum-likelihood GPD shape and scale for threshold excesses.

    With ``theta = xi / scale`` the shape that maximises the likelihood is
    ``mean(log(1 + theta*x))`` in closed form, leaving a one-dimensional
    search. ``xi`` increases monotonically with ``theta``, so the shape
    bounds map to a ``theta`` bracket. The search is a coarse grid scan
    refined by bounded Brent. The data are rescaled to unit mean first,
    which makes the fit scale-equivariant.
    """
    x = np.asarray(excesses, dtype=float)
    if x.size <= min_exceedances:
        raise EvtError(f"only {x.size} exceedances; need more than {min_exceedances}")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise EvtError("excesses must be finite and non-negative")
    mean = float(x.mean())
    if mean == 0:
        raise EvtError("all excesses are zero")
    z = x / mean
    zmax = float(z.max())
    xi_lo, xi_hi = XI_BOUNDS

    # theta must stay above -1/max(z); for large samples the lower shape
    # bound may not be reachable before that edge
    near_edge = -(1.0 - 1e-14) / zmax
    if _xi_of_theta(z, near_edge) < xi_lo:
        th_lo = optimize.brentq(lambda t: _xi_of_theta(z, t) - xi_lo, near_edge, 0.0,
                                xtol=1e-300, rtol=1e-14)
    else:
        th_lo = near_edge
    hi = 1.0
    while _xi_of_theta(z, hi) < xi_hi:
        hi *= 2.0
    th_hi = optimize.brentq(lambda t: _xi_of_theta(z, t) - xi_hi, 0.0, hi, xtol=1e-300, rtol=1e-14)

    neg = np.linspace(th_lo, 0.0, 161)[:-1]
    pos = np.geomspace(th_hi * 1e-6, th_hi, 160)
    grid = np.concatenate([neg, [0.0], pos])
    ll = kernels.gpd_profile_loglik(z, grid)
    j = int(np.argmax(ll))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    res = optimize.minimize_scalar(lambda t: -kernels.gpd_profile_loglik(z, np.array([t]))[0],
                                   bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-12 * max(abs(a), abs(b), 1e-12)})
    theta = float(res.x) if res.success and -res.fun >= ll[j] else float(grid[j])
    converged = bool(res.success)

    if abs(theta) * zmax < 1e-12:
        xi, scale_z = 0.0, float(z.mean())
    else:
        xi = _xi_of_theta(z, theta)
        scale_z = xi / theta
    if abs(xi) < XI_ZERO:
        xi, scale_z = 0.0, float(z.mean()) if abs(theta) * zmax < 1e-12 else scale_z
    at_bound = theta <= th_lo * (1 - 1e-9) or theta >= th_hi * (1 - 1e-9)
    scale = scale_z * mean
    if not converged:
        log.warning("GPD profile search did not converge (n=%d)", x.size)
    return MleResult(xi, scale, gpd_loglik(x, xi, scale), converged, at_bound)


# -- thresholds and fits -----------------------------------------------------------


def pot_excesses(values, months: list[Month] | None = None, season_months=None, Q: float = 95.0):
    """Threshold at the Q-th percentile of the season slice, and the excesses above it.

    The percentile interpolates linearly between the closest order statistics.
    """
    v = np.asarray(values, dtype=float)
    if season_months is not None:
        if months is None:
            raise EvtError("season filtering needs the month labels")
        keep = np.array([m[1] in season_months for m in months], dtype=bool)
        v = v[keep]
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise EvtError("no values in the season slice")
    if np.all(v == v[0]):
        raise EvtError("degenerate slice: all values equal")
    u = float(np.percentile(v, Q, method="linear"))
    return u, v[v > u] - u


@dataclass
class GpdFit:
    station: str
    season: str
    u: float
    xi: float
    scale: float
    n_exceedances: int
    cap: float | None = None
    source: str = "observation"
    converged: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise EvtError("GPD scale must be positive")
        if self.source not in ("observation", "prediction"):
            raise EvtError(f"unknown fit source {self.source!r}")
        if self.cap is not None and self.cap < self.u:
            raise EvtError("cap below threshold")

    @property
    def usable(self) -> bool:
        return self.n_exceedances > MIN_EXCEEDANCES


def fit_season(values, months, station: str, season: str, season_months, Q: float,
               source: str) -> GpdFit:
    u, exc = pot_excesses(values, months, season_months, Q)
    mle = fit_gpd_mle(exc)
    v = np.asarray(values, dtype=float)
    keep = np.array([m[1] in season_months for m in months], dtype=bool)
    cap = float(np.nanmax(v[keep]))
    return GpdFit(station, season, u, mle.xi, mle.scale, int(exc.size), cap, source, mle.converged)


@dataclass
class TailMapping:
    obs: GpdFit
    pred: GpdFit
    Q: float
    enabled: bool = True

    def __post_init__(self):
        if not 90.0 <= self.Q <= 95.0:
            raise EvtError(f"percentile {self.Q} outside [90, 95]")
        if (self.obs.station, self.obs.season) != (self.pred.station, self.pred.season):
            raise EvtError("paired fits must share station and season")
        if not (self.obs.usable and self.pred.usable):
            raise EvtError("both fits must be usable")


@dataclass
class StationTailMap:
    station: str
    cluster_id: int
    mappings: dict[str, TailMapping | None]


def build_tail_mapping(obs_values, obs_months, pred_values, pred_months, station: str, cluster_id: int,
                       Q: float = 95.0, calendar: SeasonCalendar | None = None,
                       enabled_seasons=None) -> StationTailMap:
    """Paired observation/prediction fits for every season of the station's calendar.

    Dry seasons are fitted but disabled unless listed in ``enabled_seasons``.
    A season whose fit is refused maps to ``None``.
    """
    calendar = calendar or SeasonCalendar()
    enabled = set(WET_SEASONS if enabled_seasons is None else enabled_seasons)
    out: dict[str, TailMapping | None] = {}
    for season, months in calendar.seasons(cluster_id).items():
        try:
            fo = fit_season(obs_values, obs_months, station, season, months, Q, "observation")
            fp = fit_season(pred_values, pred_months, station, season, months, Q, "prediction")
            out[season] = TailMapping(fo, fp, Q, enabled=season in enabled)
        except EvtError as exc:
            log.info("tail mapping disabled for %s/%s: %s", station, season, exc)
            out[season] = None
    return StationTailMap(station, cluster_id, out)


def apply_tail_mapping(y_pred: float, mapping: TailMapping | None) -> float:
    """Move a forecast above the prediction threshold onto the observed tail.

    ``p = F_pred(y - u_pred)``, then ``u_obs + F_obs^-1(min(p, P_MAX))`` capped at the
    observed maximum. Anything at or below the threshold passes through.
    """
    if mapping is None or not mapping.enabled or not y_pred > mapping.pred.u:
        return float(y_pred)
    fp, fo = mapping.pred, mapping.obs
    excess = min(y_pred - fp.u, support_end(fp.xi, fp.scale))
    p = min(gpd_cdf(excess, fp.xi, fp.scale), P_MAX)
    y = fo.u + gpd_quantile(p, fo.xi, fo.scale)
    if fo.cap is not None:
        y = min(y, fo.cap)
    return float(y)


def map_forecast(values, months: list[Month], tails: StationTailMap, calendar: SeasonCalendar | None = None):
    """Apply the station's mapping month by month, keyed on each target month's season."""
    calendar = calendar or SeasonCalendar()
    return np.array([apply_tail_mapping(v, tails.mappings.get(calendar.season_of(tails.cluster_id, m[1])))
                     for v, m in zip(values, months)])


# -- serialisation -----------------------------------------------------------------

FIT_COLUMNS = ["station", "season", "source", "u", "xi", "a_u", "exceedances", "cap"]


def write_fits_csv(fits: list[GpdFit], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIT_COLUMNS)
        for f in fits:
            w.writerow([f.station, f.season, f.source, repr(f.u), repr(f.xi), repr(f.scale),
                        f.n_exceedances, "" if f.cap is None else repr(f.cap)])


def read_fits_csv(path) -> list[GpdFit]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cap = row.get("cap") or ""
            out.append(GpdFit(row["station"], row["season"], float(row["u"]), float(row["xi"]),
                              float(row["a_u"]), int(row["exceedances"]),
                              float(cap) if cap else None, row["source"]))
    return out
