"""Stage orchestration: config, artifact manifests, and the nine pipeline stages.

Every stage writes into ``<output_dir>/<stage>/`` and finishes by writing a
``manifest.json`` with the config hash, seed, the upstream manifests it read and
the sha256 of every file it produced. A stage whose manifest matches is
skipped; a manifest built from a different config is an error unless forced.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, evt, graph as G, ingest as I, mapping, metrics as M, physics as P
from .recurrent import input_window, make_snapshots, rollout_forecast
from .trainer import (
    ClusterData, FoldData, FoldSpec, Hyperparams, grid_search, train_cluster,
    two_fold_protocol, write_leaderboard,
)
from .trainer import DROPOUT_GRID, HEADS_GRID, HIDDEN_GRID, LAYERS_GRID

log = logging.getLogger(__name__)

STAGES = ["ingest", "cluster", "physics", "graph", "train", "predict", "map-extremes", "evaluate", "render-map"]
UPSTREAM = {
    "ingest": [],
    "cluster": ["ingest"],
    "physics": ["ingest"],
    "graph": ["ingest", "cluster", "physics"],
    "train": ["ingest", "graph"],
    "predict": ["ingest", "graph", "train"],
    "map-extremes": ["ingest", "cluster", "predict"],
    "evaluate": ["map-extremes"],
    "render-map": ["ingest", "map-extremes"],
}
PRIMARY_ARTIFACT = {
    "ingest": "stations.csv", "cluster": "clusters.csv", "physics": "edge_features.csv",
    "graph": "graphs.json", "train": "model checkpoints model_c*_f*.bin", "predict": "predictions.csv",
    "map-extremes": "forecasts.csv", "evaluate": "evaluation.csv", "render-map": "forecast map",
}
GRID_DOMAINS = {"heads": HEADS_GRID, "hidden": HIDDEN_GRID, "layers": LAYERS_GRID, "dropout": DROPOUT_GRID}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class StageConflict(RuntimeError):
    """An existing manifest was produced under a different configuration."""


# -- configuration -------------------------------------------------------------------


def _month(v) -> I.Month:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ConfigError(f"expected [year, month], got {v!r}")
    y, m = int(v[0]), int(v[1])
    if not 1 <= m <= 12:
        raise ConfigError(f"bad month in {v!r}")
    return (y, m)


@dataclass
class PipelineConfig:
    stations: str
    indices: str
    winds: str
    terrain: str | None = None
    period: tuple[I.Month, I.Month] | None = None
    coverage_min_fraction: float = 0.8
    n_components: int = 3
    distance_d: float = 2.0
    r_threshold: float = 0.4
    alpha: float = 0.1
    max_lag: int = 3
    extreme_percentile: float | None = None
    forced: dict[str, int] = field(default_factory=dict)
    Cw: float = 0.01
    tau_c: float = 0.0
    tau_h: float = 0.0
    base: Hyperparams = field(default_factory=Hyperparams)
    grid: dict[str, list] = field(default_factory=dict)
    objective: str = "accuracy"
    Q: float = 95.0
    enabled_seasons: list[str] | None = None
    families: dict[int, str] = field(default_factory=dict)
    folds: list[FoldSpec] = field(default_factory=list)
    grid_spec: mapping.GridSpec = field(default_factory=lambda: mapping.GridSpec(97.0, 106.0, 5.0, 21.0))
    idw_power: float = 2.0
    map_horizon: int = 1
    seed: int = 0
    output_dir: str = "out"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        try:
            return cls._from_dict(d, base_dir)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def _from_dict(cls, d, base_dir):
        def path(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or base_dir is None else base_dir / p)

        data = d["data"]
        cl = d.get("clustering", {})
        sc = d.get("screening", {})
        ph = d.get("physics", {})
        tr = d.get("training", {})
        ev = d.get("evt", {})
        mp = d.get("map", {})
        period = d.get("period")
        base_d = dict(tr.get("base", {}))
        unknown = set(base_d) - set(Hyperparams.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training parameters: {sorted(unknown)}")
        cfg = cls(
            stations=path(data["stations"]), indices=path(data["indices"]), winds=path(data["winds"]),
            terrain=path(data.get("terrain")),
            period=None if period is None else (_month(period[0]), _month(period[1])),
            coverage_min_fraction=float(d.get("coverage_min_fraction", 0.8)),
            n_components=int(cl.get("n_components", 3)), distance_d=float(cl.get("distance_d", 2.0)),
            r_threshold=float(sc.get("r_threshold", 0.4)), alpha=float(sc.get("alpha", 0.1)),
            max_lag=int(sc.get("max_lag", 3)), extreme_percentile=sc.get("extreme_percentile"),
            forced={k: int(v) for k, v in sc.get("forced", {}).items()},
            Cw=float(ph.get("Cw", 0.01)), tau_c=float(ph.get("tau_c", 0.0)), tau_h=float(ph.get("tau_h", 0.0)),
            base=Hyperparams(**base_d),
            grid={k: list(v) for k, v in tr.get("grid", {}).items()},
            objective=tr.get("objective", "accuracy"),
            Q=float(ev.get("Q", 95.0)), enabled_seasons=ev.get("enabled_seasons"),
            families={int(k): v for k, v in ev.get("families", {}).items()},
            folds=[FoldSpec(*(( _month(f[s][0]), _month(f[s][1])) for s in ("train", "val", "test")))
                   for f in d["folds"]],
            grid_spec=mapping.GridSpec(**mp["grid"]) if "grid" in mp else mapping.GridSpec(97.0, 106.0, 5.0, 21.0),
            idw_power=float(mp.get("power", 2.0)), map_horizon=int(mp.get("horizon", 1)),
            seed=int(d.get("seed", 0)),
            output_dir=str(path(os.environ.get("RAINCAST_OUTPUT_DIR") or d.get("output_dir", "out"))),
            raw=d,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def validate(self) -> None:
        if not 90.0 <= self.Q <= 95.0:
            raise ConfigError(f"evt.Q must lie in [90, 95], got {self.Q}")
        for name, values in self.grid.items():
            if name not in GRID_DOMAINS and name != "lr":
                raise ConfigError(f"grid dimension {name!r} is not searchable")
            if not values:
                raise ConfigError(f"grid dimension {name!r} is empty")
            if name in GRID_DOMAINS and any(v not in GRID_DOMAINS[name] for v in values):
                raise ConfigError(f"grid values for {name} outside {list(GRID_DOMAINS[name])}")
        if self.objective not in ("accuracy", "rmse", "nse"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not self.folds:
            raise ConfigError("at least one fold is required")
        if not 0.0 <= self.coverage_min_fraction <= 1.0:
            raise ConfigError("coverage_min_fraction must lie in [0, 1]")
        if self.n_components < 1 or self.distance_d < 0:
            raise ConfigError("clustering needs n_components >= 1 and distance_d >= 0")
        if not 1 <= self.map_horizon <= self.base.horizon:
            raise ConfigError("map.horizon must lie in [1, training horizon]")
        if self.idw_power <= 0:
            raise ConfigError("map.power must be positive")
        g = self.grid_spec
        if not (g.lon_min < g.lon_max and g.lat_min < g.lat_max and g.resolution > 0):
            raise ConfigError("map grid bounds are empty or resolution is not positive")
        for fam in self.families.values():
            if fam not in ("south", "inland"):
                raise ConfigError(f"unknown season family {fam!r}")

    def check_inputs(self) -> None:
        for p in (self.stations, self.indices, self.winds, self.terrain):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"input file does not exist: {p}")

    def hash(self) -> str:
        d = {k: v for k, v in self.raw.items() if k not in ("output_dir", "seed")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- artifacts -----------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def manifest_path(self, stage: str) -> Path:
        return self.dir(stage) / "manifest.json"

    def manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def require(self, stage: str, name: str | None = None) -> Path:
        """Path of an upstream artifact; raises :class:`MissingArtifact` naming it."""
        target = self.manifest_path(stage) if name is None else self.dir(stage) / name
        if not target.exists():
            what = PRIMARY_ARTIFACT[stage] if name is None else name
            raise MissingArtifact(f"missing {what} in {self.dir(stage)} (no {target.name}; run stage {stage!r} first)")
        return target

    def upstream_digest(self, stage: str) -> dict[str, str]:
        return {u: sha256_file(self.require(u)) for u in UPSTREAM[stage]}

    def is_current(self, stage: str, seed: int) -> bool:
        man = self.manifest(stage)
        if man is None:
            return False
        if man["config_hash"] != self.cfg.hash() or man["seed"] != seed:
            return False
        if man["inputs"] != self.upstream_digest(stage):
            return False
        return all((self.dir(stage) / f).exists() and sha256_file(self.dir(stage) / f) == h
                   for f, h in man["outputs"].items())

    def write_manifest(self, stage: str, seed: int, inputs: dict[str, str]) -> None:
        d = self.dir(stage)
        outputs = {p.name: sha256_file(p) for p in sorted(d.iterdir()) if p.is_file() and p.name != "manifest.json"}
        man = {"stage": stage, "config_hash": self.cfg.hash(), "seed": seed, "inputs": inputs,
               "outputs": outputs, "upstream": UPSTREAM[stage]}
        self.manifest_path(stage).write_text(json.dumps(man, sort_keys=True, indent=1))


def _fmt(v) -> str:
    return repr(float(v))


# -- shared loaders ----------------------------------------------------------------


def _load_ingest(ws: Workspace):
    records = I.load_station_csv(ws.require("ingest", "stations.csv"))
    indices = I.load_index_csv(ws.require("ingest", "indices.csv"))
    norm = I.Normalization.from_json(ws.require("ingest", "normalization.json").read_text())
    panel = I.build_panel(records, indices, norm=norm)
    return records, indices, panel


def _load_clusters(ws: Workspace) -> dict[str, int]:
    with open(ws.require("cluster", "clusters.csv"), newline="", encoding="utf-8") as fh:
        return {r["station_id"]: int(r["cluster"]) for r in csv.DictReader(fh)}


def _load_graphs(ws: Workspace) -> dict[int, G.TeleconnectionGraph]:
    index = json.loads(ws.require("graph", "graphs.json").read_text())
    return {int(c): G.TeleconnectionGraph.from_json(ws.require("graph", f).read_text())
            for c, f in index.items()}


# -- stages --------------------------------------------------------------------------


def stage_ingest(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    cfg.check_inputs()
    records = I.load_station_csv(cfg.stations)
    indices = I.load_index_csv(cfg.indices)
    kept = I.coverage_filter(records, cfg.coverage_min_fraction, cfg.period)
    dropped = sorted({r.station_id for r in records} - {r.station_id for r in kept})
    if dropped:
        log.warning("coverage filter dropped %s", ", ".join(dropped))
    if not kept:
        raise I.IngestError("no station passes the coverage filter")
    filled = [I.median_impute(r) for r in kept]
    panel = I.build_panel(filled, indices, period=cfg.period)
    # Keep only the panel span on disk so downstream stages rebuild the same panel.
    months = set(panel.months)
    span = [I.StationRecord(r.station_id, r.lat, r.lon, r.elevation,
                            {m: v for m, v in r.rainfall.items() if m in months}) for r in filled]
    d = ws.dir("ingest")
    I.write_station_csv(span, d / "stations.csv")
    with open(d / "indices.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "month", *panel.indices])
        raw = panel.raw_index()
        for t, (y, m) in enumerate(panel.months):
            w.writerow([y, m, *(_fmt(v) for v in raw[t])])
    (d / "normalization.json").write_text(panel.norm.to_json())


def stage_cluster(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    records, _, _ = _load_ingest(ws)
    assign = G.cluster_stations(records, cfg.n_components, cfg.distance_d)
    with open(ws.dir("cluster") / "clusters.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "cluster"])
        for sid in sorted(assign.clusters):
            w.writerow([sid, assign.clusters[sid]])


def stage_physics(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    cfg.check_inputs()
    records, _, _ = _load_ingest(ws)
    winds = P.load_winds_csv(cfg.winds)
    table = P.build_edge_feature_table(records, winds, cfg.Cw)
    d = ws.dir("physics")
    with open(d / "edge_features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "feature"])
        for sid in sorted(table):
            w.writerow([sid, _fmt(table[sid])])
    if cfg.terrain is not None:
        terrain, dx, dy = P.load_terrain(cfg.terrain)
        mean_wind = np.mean(np.vstack([winds[r.station_id] for r in records]), axis=0)
        ocfg = P.OrographicConfig(Cw=cfg.Cw, tau_c=cfg.tau_c, tau_h=cfg.tau_h,
                                  U=float(mean_wind[0]), V=float(mean_wind[1]), dx=dx, dy=dy)
        P.write_field_csv(P.simulate_field(terrain, ocfg), d / "orographic_field.csv")


def screen_cluster(panel: I.MonthlyPanel, stations: list[str], cfg: PipelineConfig) -> tuple[dict[str, int], list[dict]]:
    """Pearson decides acceptance; the lag is the smallest one whose station-mean Granger p-value passes."""
    accepted, rows = {}, []
    for ix in panel.indices:
        sr = G.pearson_screen(panel, ix, stations, cfg.r_threshold, cfg.extreme_percentile)
        mean_p = {}
        for lag in range(1, cfg.max_lag + 1):
            ps = []
            for s in stations:
                try:
                    ps.append(G.granger_fit(panel.column(s), panel.column(ix), lag).p_value)
                except np.linalg.LinAlgError:
                    pass
            mean_p[lag] = float(np.mean(ps)) if ps else math.nan
        passing = [lag for lag, p in mean_p.items() if p <= cfg.alpha]
        lag = passing[0] if passing else 0
        if sr.accepted:
            accepted[ix] = lag
        rows.append({"index": ix, "mean_abs_r": sr.mean_abs_r, "accepted": sr.accepted, "lag": lag,
                     **{f"p_lag{k}": v for k, v in mean_p.items()}})
    return accepted, rows


def stage_graph(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    _, _, panel = _load_ingest(ws)
    clusters = _load_clusters(ws)
    with open(ws.require("physics", "edge_features.csv"), newline="", encoding="utf-8") as fh:
        feats = {r["station_id"]: float(r["feature"]) for r in csv.DictReader(fh)}
    # Screen on the earliest training span only so test months never influence the graph.
    rows = two_fold_protocol(panel.months, cfg.folds)
    lo, hi = rows[0].train
    screen_panel = panel.slice(lo, hi)
    d = ws.dir("graph")
    index = {}
    screen_rows = []
    for c in sorted(set(clusters.values())):
        members = sorted(s for s, k in clusters.items() if k == c)
        accepted, srows = screen_cluster(screen_panel, members, cfg)
        g = G.assemble_graph(c, members, accepted, feats, cfg.forced, panel.indices)
        name = f"graph_c{c}.json"
        (d / name).write_text(g.to_json())
        index[str(c)] = name
        screen_rows += [{"cluster": c, **r} for r in srows]
    (d / "graphs.json").write_text(json.dumps(index, sort_keys=True, indent=1))
    cols = ["cluster", "index", "mean_abs_r", "accepted", "lag"] + [f"p_lag{k}" for k in range(1, cfg.max_lag + 1)]
    with open(d / "screening.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in screen_rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _fold_windows(panel, g, hp: Hyperparams, fold_rows) -> FoldData:
    W, H = hp.window, hp.horizon
    return FoldData(
        make_snapshots(panel, W, H, graph=g, target_rows=fold_rows.train),
        make_snapshots(panel, W, H, graph=g, target_rows=fold_rows.val),
        make_snapshots(panel, W, H, graph=g, target_rows=fold_rows.test),
    )


def _train_one_cluster(args) -> dict:
    """Worker: grid search (if any) then one model per fold. Returns file payloads."""
    cfg, c, graph_json, panel, out_dir, seed = args
    g = G.TeleconnectionGraph.from_json(graph_json)
    data = ClusterData.from_graph(g, panel.norm)
    fold_rows = two_fold_protocol(panel.months, cfg.folds)
    folds = [_fold_windows(panel, g, cfg.base, fr) for fr in fold_rows]
    for k, f in enumerate(folds):
        if not f.train or not f.val or not f.test:
            raise ValueError(f"fold {k + 1} has an empty window set for cluster {c}")
    hp = cfg.base
    if cfg.grid:
        hp, board = grid_search(data, folds, cfg.base, cfg.grid, cfg.objective, seed=seed)
        write_leaderboard(board, Path(out_dir) / f"leaderboard_c{c}.csv")
    chosen = {}
    for k, f in enumerate(folds, 1):
        model, report = train_cluster(data, f.train, hp, f.val, seed=seed)
        prefix = Path(out_dir) / f"model_c{c}_f{k}"
        checkpoint.save_model(model, prefix, {"cluster": c, "fold": k})
        Path(out_dir, f"report_c{c}_f{k}.json").write_text(report.to_json())
        chosen[k] = {"best_epoch": report.best_epoch, "stopping_reason": report.stopping_reason}
    return {"cluster": c, "hp": {f: getattr(hp, f) for f in Hyperparams.__dataclass_fields__}, "folds": chosen}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RAINCAST_THREADS", "1")))
    except ValueError:
        raise ConfigError("RAINCAST_THREADS must be an integer") from None


def stage_train(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    _, _, panel = _load_ingest(ws)
    graphs = _load_graphs(ws)
    jobs = [(cfg, c, graphs[c].to_json(), panel, str(ws.dir("train")), seed) for c in sorted(graphs)]
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as ex:
            results = list(ex.map(_train_one_cluster, jobs))
    else:
        results = [_train_one_cluster(j) for j in jobs]
    (ws.dir("train") / "selection.json").write_text(json.dumps({str(r["cluster"]): r for r in results},
                                                               sort_keys=True, indent=1))


PRED_COLUMNS = ["cluster", "fold", "kind", "station", "anchor", "target", "horizon", "pred", "obs"]


def _ym(m: I.Month) -> str:
    return f"{m[0]:04d}-{m[1]:02d}"


def _parse_ym(s: str) -> I.Month:
    y, m = s.split("-")
    return (int(y), int(m))


def stage_predict(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    _, _, panel = _load_ingest(ws)
    graphs = _load_graphs(ws)
    fold_rows = two_fold_protocol(panel.months, cfg.folds)
    raw = panel.raw_rain()
    col = {s: k for k, s in enumerate(panel.stations)}
    rows = []
    for c in sorted(graphs):
        g = graphs[c]
        data = ClusterData.from_graph(g, panel.norm)
        for k, fr in enumerate(fold_rows, 1):
            ws.require("train", f"model_c{c}_f{k}.bin")
            model, _ = checkpoint.load_model(ws.require("train", f"model_c{c}_f{k}.json").with_suffix(""))
            W, H = model.config.window, model.config.horizon
            for kind, span in (("test", fr.test), ("train", fr.train)):
                for w in make_snapshots(panel, W, H, graph=g, target_rows=span):
                    pred = rollout_forecast(w, model, data.edges, data.station_idx, data.means, data.stds)
                    hs = range(H) if kind == "test" else range(1)  # train side keeps lead 1 only
                    for s, sid in enumerate(g.stations):
                        for h in hs:
                            tgt = w.target_months[h]
                            obs = raw[panel.months.index(tgt), col[sid]]
                            rows.append([c, k, kind, sid, _ym(w.anchor), _ym(tgt), h + 1, pred[s, h], obs])
            if k == len(fold_rows):
                w = input_window(panel, len(panel) - 1, W, g)
                pred = rollout_forecast(w, model, data.edges, data.station_idx, data.means, data.stds)
                last = I.month_index(panel.months[-1])
                for s, sid in enumerate(g.stations):
                    for h in range(H):
                        tgt = I.month_from_index(last + h + 1)
                        rows.append([c, k, "operational", sid, _ym(w.anchor), _ym(tgt), h + 1, pred[s, h], math.nan])
    with open(ws.dir("predict") / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_COLUMNS)
        for r in rows:
            w.writerow([*r[:7], _fmt(r[7]), _fmt(r[8])])


def _read_predictions(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        out = []
        for r in csv.DictReader(fh):
            r["cluster"], r["fold"], r["horizon"] = int(r["cluster"]), int(r["fold"]), int(r["horizon"])
            r["pred"], r["obs"] = float(r["pred"]), float(r["obs"])
            out.append(r)
        return out


def _map_cluster(args):
    """Worker: per-fold observation/prediction tail fits and mapped values for one cluster."""
    cfg, c, rows, obs_by_station, months, fold_rows = args
    calendar = evt.SeasonCalendar(cfg.families)
    fits, mapped = [], {}
    for k, fr in enumerate(fold_rows, 1):
        lo, hi = fr.train
        obs_months = months[lo:hi]
        fold = [r for r in rows if r["fold"] == k]
        for sid in sorted({r["station"] for r in fold}):
            train = [r for r in fold if r["station"] == sid and r["kind"] == "train"]
            tails = evt.build_tail_mapping(
                obs_by_station[sid][lo:hi], obs_months,
                np.array([r["pred"] for r in train]), [_parse_ym(r["target"]) for r in train],
                sid, c, cfg.Q, calendar, cfg.enabled_seasons)
            for season, tm in sorted(tails.mappings.items()):
                if tm is not None:
                    fits += [(k, tm.obs, tm.enabled), (k, tm.pred, tm.enabled)]
            for r in fold:
                if r["station"] != sid or r["kind"] == "train":
                    continue
                season = calendar.season_of(c, _parse_ym(r["target"])[1])
                v = evt.apply_tail_mapping(r["pred"], tails.mappings.get(season))
                mapped[(r["kind"], k, sid, r["target"], r["horizon"])] = max(v, 0.0)
    return c, fits, mapped


def stage_map_extremes(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    _, _, panel = _load_ingest(ws)
    rows = _read_predictions(ws.require("predict", "predictions.csv"))
    fold_rows = two_fold_protocol(panel.months, cfg.folds)
    raw = panel.raw_rain()
    obs_by_station = {s: raw[:, k] for k, s in enumerate(panel.stations)}
    clusters = sorted({r["cluster"] for r in rows})
    jobs = [(cfg, c, [r for r in rows if r["cluster"] == c], obs_by_station, panel.months, fold_rows)
            for c in clusters]
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as ex:
            results = list(ex.map(_map_cluster, jobs))
    else:
        results = [_map_cluster(j) for j in jobs]
    d = ws.dir("map-extremes")
    with open(d / "gpd_fits.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "fold", "enabled", *evt.FIT_COLUMNS])
        for c, fits, _ in results:
            for k, f, enabled in fits:
                w.writerow([c, k, int(enabled), f.station, f.season, f.source, _fmt(f.u), _fmt(f.xi),
                            _fmt(f.scale), f.n_exceedances, "" if f.cap is None else _fmt(f.cap)])
    mapped = {}
    for c, _, m in results:
        mapped.update({(c, *key): v for key, v in m.items()})
    with open(d / "forecasts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*PRED_COLUMNS, "mapped"])
        for r in rows:
            if r["kind"] == "train":
                continue
            v = mapped[(r["cluster"], r["kind"], r["fold"], r["station"], r["target"], r["horizon"])]
            w.writerow([r["cluster"], r["fold"], r["kind"], r["station"], r["anchor"], r["target"],
                        r["horizon"], _fmt(r["pred"]), _fmt(r["obs"]), _fmt(v)])


def _read_forecasts(path) -> list[dict]:
    rows = _read_predictions(path)
    with open(path, newline="", encoding="utf-8") as fh:
        for r, raw in zip(rows, csv.DictReader(fh)):
            r["mapped"] = float(raw["mapped"])
    return rows


def stage_evaluate(ws: Workspace, seed: int) -> None:
    rows = [r for r in _read_forecasts(ws.require("map-extremes", "forecasts.csv")) if r["kind"] == "test"]
    out = []
    for c in sorted({r["cluster"] for r in rows}):
        per_variant = {"raw": [], "mapped": []}
        for k in sorted({r["fold"] for r in rows if r["cluster"] == c}):
            sel = [r for r in rows if r["cluster"] == c and r["fold"] == k]
            stations = sorted({r["station"] for r in sel})
            anchors = sorted({r["anchor"] for r in sel})
            H = max(r["horizon"] for r in sel)
            shape = (len(anchors), len(stations), H)
            obs, raw_p, map_p = np.empty(shape), np.empty(shape), np.empty(shape)
            for r in sel:
                ix = (anchors.index(r["anchor"]), stations.index(r["station"]), r["horizon"] - 1)
                obs[ix], raw_p[ix], map_p[ix] = r["obs"], r["pred"], r["mapped"]
            per_variant["raw"].append(M.eval_table(obs, raw_p, stations).aggregate())
            per_variant["mapped"].append(M.eval_table(obs, map_p, stations).aggregate())
        for metric in ("accuracy", "rmse", "nse", "smape"):
            out.append({"cluster": c, "metric": metric,
                        **{v: float(np.mean([m[metric] for m in per_variant[v]])) for v in per_variant}})
    M.write_eval_rows(out, ["raw", "mapped"], ws.dir("evaluate") / "evaluation.csv")


def stage_render_map(ws: Workspace, seed: int) -> None:
    cfg = ws.cfg
    records, _, _ = _load_ingest(ws)
    rows = [r for r in _read_forecasts(ws.require("map-extremes", "forecasts.csv"))
            if r["kind"] == "operational" and r["horizon"] == cfg.map_horizon]
    if not rows:
        raise MissingArtifact("no operational forecast rows to map")
    coords = {r.station_id: (r.lon, r.lat) for r in records}
    rows.sort(key=lambda r: r["station"])
    lon = [coords[r["station"]][0] for r in rows]
    lat = [coords[r["station"]][1] for r in rows]
    raster = mapping.idw_interpolate(lon, lat, [r["mapped"] for r in rows], cfg.grid_spec, cfg.idw_power)
    mapping.render_map(raster, ws.dir("render-map") / f"forecast_{rows[0]['target']}_h{cfg.map_horizon}")


STAGE_FUNCS = {
    "ingest": stage_ingest, "cluster": stage_cluster, "physics": stage_physics, "graph": stage_graph,
    "train": stage_train, "predict": stage_predict, "map-extremes": stage_map_extremes,
    "evaluate": stage_evaluate, "render-map": stage_render_map,
}


def run_stage(stage: str, cfg: PipelineConfig, force: bool = False, seed: int | None = None) -> str:
    """Run one stage; returns ``"ran"`` or ``"skipped"``."""
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    seed = cfg.seed if seed is None else seed
    ws = Workspace(cfg)
    inputs = ws.upstream_digest(stage)  # raises MissingArtifact first
    if not force:
        if ws.is_current(stage, seed):
            log.info("%s: up to date, skipping", stage)
            return "skipped"
        man = ws.manifest(stage)
        if man is not None and (man["config_hash"] != cfg.hash() or man["seed"] != seed):
            raise StageConflict(f"{stage}: existing artifacts were built with a different config or seed; "
                                "rerun with --force")
    d = ws.dir(stage)
    d.mkdir(parents=True, exist_ok=True)
    for p in d.iterdir():
        if p.is_file():
            p.unlink()
    log.info("%s: running", stage)
    STAGE_FUNCS[stage](ws, seed)
    ws.write_manifest(stage, seed, inputs)
    return "ran"


def run_all(cfg: PipelineConfig, force: bool = False, seed: int | None = None) -> dict[str, str]:
    return {s: run_stage(s, cfg, force, seed) for s in STAGES}
