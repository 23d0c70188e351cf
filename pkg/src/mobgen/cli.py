"""``mobgen`` command line: prepare, calibrate, simulate, validate."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import PURPOSES, __version__
from .bundle import CalibrationBundle, default_bundle
from .calibration import CellTable, calibrate, person_days, read_survey
from .destination import DestinationChooser
from .errors import BundleError, EmptySurveyError, MobgenError, SchemaError
from .grid import build_grid, load_grid, save_grid
from .ingest import (apply_census, extract_buildings, load_buildings, load_model_area, read_census, read_osm,
                     save_buildings, total_population)
from .population import UNDEFINED, SocioDistribution, create_population
from .routing import BeelineDistances, BeelineRouter, DistanceMatrix, GraphRouter, RoadGraph, build_road_graph, \
    distance_matrix
from .schedule import WEEKDAYS, Locator, simulate
from .validation import (RESOLUTIONS, STATES, MetricReport, Stop, ValidationGrid, daily_distances, format_table,
                         od_metrics, schedule_timeline, summarize_distances, survey_timeline, temporal_difference,
                         temporal_shares, zonal_attraction)

log = logging.getLogger("mobgen")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_BUNDLE, EXIT_SURVEY = 0, 1, 2, 3, 4


class InputMissing(MobgenError):
    pass


class BundleMissing(MobgenError):
    pass


# --------------------------------------------------------------------------
# Content-addressed cache


def cache_dir() -> Path:
    root = os.environ.get("MOBGEN_CACHE") or Path.home() / ".cache" / "mobgen"
    return Path(root)


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_key(*parts) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(json.dumps(parts, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _require(path, what):
    if path is None:
        raise InputMissing(f"--{what} is required")
    if not Path(path).is_file():
        raise InputMissing(f"{what} file not found: {path}")
    return Path(path)


def save_graph(g: RoadGraph, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, node_ids=g.node_ids, lon=g.lon, lat=g.lat, indptr=g.indptr, indices=g.indices,
                 length=g.length, time=g.time)


def load_graph(path) -> RoadGraph:
    with np.load(path) as z:
        return RoadGraph(**{k: z[k] for k in z.files})


@dataclass
class Model:
    buildings: list
    cells: list
    dmat: object
    graph: RoadGraph | None
    census: bool
    directory: Path


def prepare_model(args) -> Model:
    """Build or reuse buildings, road graph, grid and distance matrix.

    Each artifact is cached under a key derived from the content hash of its
    inputs and the parameters it depends on.
    """
    osm = _require(args.osm, "osm")
    area_path = _require(args.area, "area")
    census = _require(args.census, "census") if args.census else None
    if args.buffer < 0:
        raise ValueError("--buffer must be >= 0")
    root = cache_dir()
    osm_h, area_h = file_digest(osm), file_digest(area_path)
    census_h = file_digest(census) if census else None

    def slot(kind, key, name):
        d = root / kind / key
        d.mkdir(parents=True, exist_ok=True)
        return d / name

    osm_data = None

    def osm_once():
        nonlocal osm_data
        if osm_data is None:
            osm_data = read_osm(osm)
        return osm_data

    b_key = cache_key("buildings", osm_h, area_h, census_h, args.buffer, args.census_property)
    b_path = slot("buildings", b_key, "buildings.ndjson")
    if b_path.exists():
        log.info("cache hit: buildings %s", b_key)
    else:
        area = load_model_area(area_path, args.buffer)
        buildings = extract_buildings(osm_once(), area)
        if census:
            apply_census(buildings, read_census(census, args.census_property), args.census_property)
        save_buildings(buildings, str(b_path) + ".tmp")
        os.replace(str(b_path) + ".tmp", b_path)
        log.info("built %d buildings -> %s", len(buildings), b_path)
    buildings = load_buildings(b_path)
    ids = [b.id for b in buildings]

    g_key = cache_key("grid", b_key, args.grid_res)
    g_path = slot("grid", g_key, "grid.json")
    if g_path.exists():
        log.info("cache hit: grid %s", g_key)
    else:
        area = load_model_area(area_path, args.buffer)
        cells = build_grid(buildings, area, args.grid_res, threads=args.threads)
        save_grid(cells, g_path, ids)
        log.info("built grid with %d cells -> %s", len(cells), g_path)
    cells = load_grid(g_path, ids)
    CellTable.from_grid(buildings, cells).save(g_path.with_name("cells.json"))

    graph = None
    if args.dist_metric == "beeline":
        log.warning("beeline distances in use: no distance matrix is computed and deterrence sees "
                    "straight-line distances, which lowers result quality")
        dmat = BeelineDistances([c.id for c in cells], [c.lon for c in cells], [c.lat for c in cells])
    else:
        r_key = cache_key("graph", osm_h)
        r_path = slot("graph", r_key, "graph.npz")
        if r_path.exists():
            log.info("cache hit: road graph %s", r_key)
        else:
            save_graph(build_road_graph(osm_once()), r_path)
            log.info("built road graph -> %s", r_path)
        graph = load_graph(r_path)
        d_key = cache_key("dmat", g_key, r_key, "routed")
        d_path = slot("dmat", d_key, "distances.bin")
        if d_path.exists():
            log.info("cache hit: distance matrix %s", d_key)
        else:
            dm = distance_matrix(graph, cells, threads=args.threads)
            dm.save(str(d_path) + ".tmp")
            os.replace(str(d_path) + ".tmp", d_path)
            log.info("built %dx%d distance matrix -> %s", len(cells), len(cells), d_path)
        dmat = DistanceMatrix.load(d_path, [c.id for c in cells])
    return Model(buildings, cells, dmat, graph, total_population(buildings) > 0, g_path.parent)


# --------------------------------------------------------------------------
# Schedule output


def _activity_json(act, b) -> dict:
    return {"type": act.type.upper(),
            "stayTime": None if act.stay is None else round(float(act.stay), 3),
            "lat": round(b.lat, 7), "lon": round(b.lon, 7), "inFocusArea": bool(b.in_focus_area)}


def schedules_json(agents, plans, buildings) -> str:
    out = []
    for agent, days in zip(agents, plans):
        out.append({
            "id": agent.id,
            "features": agent.features.to_dict(),
            "days": [{"weekday": p.weekday, "activities": [_activity_json(a, buildings[a.location])
                                                           for a in p.activities]} for p in days],
        })
    return json.dumps(out, ensure_ascii=False, separators=(",", ":")) + "\n"


def load_schedule_stops(path) -> list:
    """Schedules JSON to per-agent lists of per-day :class:`Stop` lists."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return [[[Stop(a["type"].lower(), a["stayTime"], float(a["lon"]), float(a["lat"]))
                  for a in day["activities"]] for day in agent["days"]] for agent in doc]
    except (KeyError, TypeError, AttributeError) as exc:
        raise SchemaError(f"{path}: malformed schedules file ({exc!r})") from None


def survey_stops(trips, table: CellTable) -> list:
    """Survey person-days as stops at cell centroids (stay from diary times)."""
    out = []
    for pd in person_days(trips):
        stops = []
        for i, (act, cell) in enumerate(zip(pd.chain, pd.locations)):
            j = table.index([cell])[0]
            stay = float(pd.dwell_hours[i] * 60) if i < len(pd.chain) - 1 else None
            stops.append(Stop(act, stay, float(table.lon[j]), float(table.lat[j])))
        out.append([stops])
    return out


def load_bundle(path) -> CalibrationBundle:
    if path is None:
        return default_bundle()
    if not Path(path).is_file():
        raise BundleMissing(f"bundle file not found: {path}")
    return CalibrationBundle.load(path)


# --------------------------------------------------------------------------
# Commands


def cmd_prepare(args) -> int:
    model = prepare_model(args)
    print(model.directory)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    survey = _require(args.survey, "survey")
    try:
        trips = read_survey(survey)
    except SchemaError as exc:
        raise EmptySurveyError(str(exc)) from exc
    if args.cells:
        table = CellTable.load(_require(args.cells, "cells"))
        dist = None
    else:
        model = prepare_model(args)
        table = CellTable.from_grid(model.buildings, model.cells)
        dist = model.dmat.d
    bundle, _ = calibrate(trips, table, dist, seed=args.seed)
    out = Path(args.out or "bundle.json")
    bundle.save(out)
    log.info("bundle written to %s", out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.agents < 1:
        raise ValueError("--agents must be >= 1")
    if args.days < 1:
        raise ValueError("--days must be >= 1")
    bundle = load_bundle(args.bundle)
    model = prepare_model(args)
    deterrence = dict(bundle.deterrence)
    chooser = DestinationChooser.from_grid(model.buildings, model.cells, model.dmat, bundle.attraction, deterrence)
    socio = SocioDistribution.from_json(_require(args.socio, "socio")) if args.socio else None
    agents = create_population(args.agents, model.buildings, seed=args.seed, chooser=chooser, socio=socio)
    plans = simulate(agents, args.days, args.weekday, bundle, seed=args.seed, locator=Locator(chooser))
    text = schedules_json(agents, plans, model.buildings)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.info("%d agents x %d days written to %s", args.agents, args.days, args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    from . import plotting

    survey = _require(args.survey, "survey")
    sched = _require(args.schedules, "schedules")
    table = CellTable.load(_require(args.cells, "cells"))
    try:
        ref = survey_stops(read_survey(survey), table)
    except SchemaError as exc:
        raise EmptySurveyError(str(exc)) from exc
    if sched.suffix.lower() == ".csv":
        model = survey_stops(read_survey(sched), table)
    else:
        model = load_schedule_stops(sched)
    if args.osm:
        router = GraphRouter(load_graph_for(args.osm))
    else:
        router = BeelineRouter()
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)

    def trips(agents):
        return [(a.lon, a.lat, b.lon, b.lat, b.type) for days in agents for day in days for a, b in zip(day, day[1:])]

    mt, st = trips(model), trips(ref)
    bbox = (float(table.lon.min()), float(table.lat.min()), float(table.lon.max()), float(table.lat.max()))
    blocks, records = [], []
    for res in args.resolutions:
        rows = []
        for act in ("all",) + PURPOSES:
            m = np.array([r[:4] for r in mt if act == "all" or r[4] == act]).reshape(-1, 4)
            s = np.array([r[:4] for r in st if act == "all" or r[4] == act]).reshape(-1, 4)
            if len(m) == 0 or len(s) == 0:
                continue
            za = zonal_attraction(m[:, 2:], s[:, 2:], res, bbox)
            od = od_metrics(m, s, res, bbox)
            rows.append((act, res, za))
            records.append({"kind": "attraction", "activity": act, "resolution": res, **za.to_dict()})
            records.append({"kind": "od", "activity": act, "resolution": res, **od.to_dict()})
        blocks.append(f"Trip attraction, {res} m\n" + format_table(rows))
        od_rows = [(r["activity"], res, MetricReport(r["r2"], r["mae"], r["js"], r["n_zones"]))
                   for r in records if r["kind"] == "od" and r["resolution"] == res]
        blocks.append(f"Origin-destination, {res} m\n" + format_table(od_rows))

    mkm, skm = daily_distances(model, router), daily_distances(ref, router)
    dist = {"model": summarize_distances(mkm).to_dict(), "survey": summarize_distances(skm).to_dict()}
    def timelines(stops, path):
        if args.survey_travel == "router" or path.suffix.lower() != ".csv":
            return [schedule_timeline([day], router) for days in stops for day in days]
        return [survey_timeline(rows) for rows in _survey_rows(path)]

    mtl, stl = timelines(model, sched), timelines(ref, survey)
    times, mshare = temporal_shares(mtl, args.step, 1440.0)
    _, sshare = temporal_shares(stl, args.step, 1440.0)

    report = {"schema": "mobgen.report/1", "metrics": records, "daily_distance_km": dist,
              "temporal_max_abs_difference": temporal_difference(mshare, sshare)}
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    (out / "report.txt").write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "activity", "resolution", "r2", "mae", "js", "n_zones"])
        for r in records:
            w.writerow([r["kind"], r["activity"], r["resolution"], f"{r['r2']:.6f}", f"{r['mae']:.6f}",
                        f"{r['js']:.6f}", r["n_zones"]])
    with open(out / "temporal.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["minute"] + [f"model_{s}" for s in STATES] + [f"survey_{s}" for s in STATES])
        for t, a, b in zip(times, mshare, sshare):
            w.writerow([f"{t:g}"] + [f"{x:.6f}" for x in a] + [f"{x:.6f}" for x in b])

    grid_res = max(args.resolutions)
    vg = ValidationGrid(bbox, grid_res)
    cm = Counter(vg.zone(np.array([r[2:4] for r in mt]).reshape(-1, 2)))
    cs = Counter(vg.zone(np.array([r[2:4] for r in st]).reshape(-1, 2)))
    zones = sorted(set(cm) | set(cs))
    tm, ts = sum(cm.values()) or 1, sum(cs.values()) or 1
    scatter = {f"{grid_res} m": ([cs[z] / ts for z in zones], [cm[z] / tm for z in zones])}
    plotting.zonal_scatter(scatter, out / "zonal_attraction.png")
    plotting.temporal_plot(times, mshare, sshare, out / "temporal_shares.png")
    plotting.distance_histogram(mkm, skm, out / "daily_distance.png")
    print("\n\n".join(blocks))
    log.info("report written to %s", out)
    return EXIT_OK


def _survey_rows(path):
    groups = {}
    for t in read_survey(path):
        groups.setdefault(t.person_id, []).append(t)
    return list(groups.values())


def load_graph_for(osm_path) -> RoadGraph:
    osm = _require(osm_path, "osm")
    key = cache_key("graph", file_digest(osm))
    path = cache_dir() / "graph" / key / "graph.npz"
    if path.exists():
        return load_graph(path)
    g = build_road_graph(read_osm(osm))
    path.parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, path)
    return g


# --------------------------------------------------------------------------
# Argument parsing


def _weekday(s: str) -> str:
    s = s.lower()[:2] if s.lower() != UNDEFINED else UNDEFINED
    if s != UNDEFINED and s not in WEEKDAYS:
        raise argparse.ArgumentTypeError(f"weekday must be one of {', '.join(WEEKDAYS)} or undefined")
    return s


def _resolutions(s: str):
    try:
        vals = tuple(int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("resolutions must be comma-separated integers (meters)") from None
    if any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("resolutions must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobgen", description="Activity-based mobility demand generator.")
    p.add_argument("--version", action="version", version=f"mobgen {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, required=True):
        sp.add_argument("--osm", required=required, help="OSM extract (.osm or .osm.pbf)")
        sp.add_argument("--area", required=required, help="focus area GeoJSON")
        sp.add_argument("--census", help="census GeoJSON with a population property")
        sp.add_argument("--census-property", default="population")
        sp.add_argument("--buffer", type=float, default=0.0, help="buffer distance in meters")
        sp.add_argument("--grid-res", type=float, default=150.0, help="grid threshold in meters")
        sp.add_argument("--dist-metric", choices=("routed", "beeline"), default="routed")
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("prepare", help="extract buildings, build grid and distance matrix")
    model_args(sp)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("calibrate", help="fit a calibration bundle from a survey CSV")
    model_args(sp, required=False)
    sp.add_argument("--survey", required=True)
    sp.add_argument("--cells", help="cell table JSON (instead of --osm/--area)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="bundle path (default bundle.json)")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("simulate", help="generate activity schedules")
    model_args(sp)
    sp.add_argument("--agents", type=int, default=1000)
    sp.add_argument("--days", type=int, default=1)
    sp.add_argument("--weekday", type=_weekday, default="mo")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bundle", help="calibration bundle JSON (default: shipped bundle)")
    sp.add_argument("--socio", help="socio-demographic distribution JSON")
    sp.add_argument("--out", help="schedules JSON path (default stdout)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("validate", help="compare schedules with a survey")
    sp.add_argument("--survey", required=True)
    sp.add_argument("--schedules", required=True, help="schedules JSON (or a second survey CSV)")
    sp.add_argument("--cells", required=True, help="cell table JSON locating survey cells")
    sp.add_argument("--osm", help="route daily distances on this OSM road network (default beeline)")
    sp.add_argument("--resolutions", type=_resolutions, default=RESOLUTIONS)
    sp.add_argument("--step", type=float, default=15.0, help="temporal step in minutes")
    sp.add_argument("--survey-travel", choices=("diary", "router"), default="diary",
                    help="survey travel times from diary timestamps or from the router")
    sp.add_argument("--out", help="report directory (default report/)")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputMissing, FileNotFoundError) as exc:
        print(f"mobgen: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BundleMissing, BundleError) as exc:
        print(f"mobgen: {exc}", file=sys.stderr)
        return EXIT_BUNDLE
    except EmptySurveyError as exc:
        print(f"mobgen: {exc}", file=sys.stderr)
        return EXIT_SURVEY
    except (MobgenError, ValueError) as exc:
        print(f"mobgen: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
