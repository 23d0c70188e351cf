"""Focus-area handling, OSM building extraction and census population."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import osmium
import shapely
from shapely.geometry import shape
from shapely.strtree import STRtree

from .errors import EmptyAreaError, EmptyModelError, ParseError, SchemaError
from .geo import LocalProjection, polygon_parts

log = logging.getLogger(__name__)

LANDUSES = ("residential", "industrial", "commercial", "none")
LANDUSE_MAP = {
    "residential": "residential",
    "industrial": "industrial",
    "commercial": "commercial",
    "retail": "commercial",
}
POI_KINDS = ("shop", "office", "school", "university")

# Field names of the persisted building table, in output order.
BUILDING_FIELDS = (
    "id",
    "coordinates",
    "area",
    "population",
    "landuse",
    "number_of_shops",
    "number_of_offices",
    "number_of_schools",
    "number_of_universities",
    "in_focus_area",
)


@dataclass
class AreaGeometry:
    """Model area in WGS84 lon/lat.

    ``geometry`` is the area buildings are extracted from; ``focus`` is always
    the un-buffered focus area used for in-focus tagging.
    """

    geometry: shapely.Geometry
    role: str = "focus"
    focus: shapely.Geometry | None = None
    buffer_m: float = 0.0

    def __post_init__(self):
        if self.focus is None:
            self.focus = self.geometry

    @property
    def polygons(self):
        return list(polygon_parts(self.geometry))

    def projection(self) -> LocalProjection:
        return LocalProjection.for_geometry(self.focus)

    def area_m2(self) -> float:
        return self.projection().project(self.geometry).area


@dataclass
class Building:
    id: str
    lon: float
    lat: float
    area: float
    population: float = 0.0
    landuse: str = "none"
    n_shops: int = 0
    n_offices: int = 0
    n_schools: int = 0
    n_universities: int = 0
    in_focus_area: bool = True
    footprint: shapely.Geometry | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "coordinates": [round(self.lon, 8), round(self.lat, 8)],
            "area": round(self.area, 4),
            "population": self.population,
            "landuse": self.landuse,
            "number_of_shops": self.n_shops,
            "number_of_offices": self.n_offices,
            "number_of_schools": self.n_schools,
            "number_of_universities": self.n_universities,
            "in_focus_area": self.in_focus_area,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Building":
        missing = [k for k in BUILDING_FIELDS if k not in rec]
        if missing:
            raise SchemaError(f"building record lacks field(s): {', '.join(missing)}")
        lon, lat = rec["coordinates"]
        return cls(
            id=str(rec["id"]),
            lon=float(lon),
            lat=float(lat),
            area=float(rec["area"]),
            population=float(rec["population"]),
            landuse=rec["landuse"],
            n_shops=int(rec["number_of_shops"]),
            n_offices=int(rec["number_of_offices"]),
            n_schools=int(rec["number_of_schools"]),
            n_universities=int(rec["number_of_universities"]),
            in_focus_area=bool(rec["in_focus_area"]),
        )


@dataclass
class CensusCell:
    geometry: shapely.Geometry
    population: float


# --------------------------------------------------------------------------
# Focus area


def _read_geojson(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _features(doc: dict) -> list[dict]:
    kind = doc.get("type")
    if kind == "FeatureCollection":
        return list(doc.get("features") or [])
    if kind == "Feature":
        return [doc]
    if kind in ("Polygon", "MultiPolygon", "GeometryCollection"):
        return [{"type": "Feature", "geometry": doc, "properties": {}}]
    raise ParseError(f"unsupported GeoJSON object type {kind!r}")


def parse_focus_area(path) -> AreaGeometry:
    """Read the union of all polygonal geometries in a GeoJSON file."""
    doc = _read_geojson(path)
    polys = []
    for feat in _features(doc):
        geom = feat.get("geometry")
        if not geom:
            continue
        try:
            g = shape(geom)
        except Exception as exc:  # shapely raises a zoo of types here
            raise ParseError(f"{path}: invalid geometry: {exc}") from exc
        polys.extend(polygon_parts(g))
    if not polys:
        raise EmptyAreaError(f"{path}: no polygonal geometry found")
    geom = shapely.union_all(polys) if len(polys) > 1 else polys[0]
    return AreaGeometry(geometry=geom, role="focus")


def buffer_area(area: AreaGeometry, dist: float) -> AreaGeometry:
    """Dilate the focus area by ``dist`` meters in a local metric frame."""
    if dist < 0:
        raise ValueError(f"buffer distance must be >= 0, got {dist}")
    focus = area.focus
    if dist == 0:
        return AreaGeometry(geometry=focus, role="focus+buffer", focus=focus, buffer_m=0.0)
    proj = LocalProjection.for_geometry(focus)
    buffered = proj.project(focus).buffer(dist, quad_segs=32)
    return AreaGeometry(geometry=proj.unproject(buffered), role="focus+buffer", focus=focus,
                        buffer_m=float(dist))


# --------------------------------------------------------------------------
# OSM reading


@dataclass
class OsmData:
    """The subset of an OSM file the model needs, detached from pyosmium."""

    buildings: list = field(default_factory=list)  # (id, geometry)
    landuse: list = field(default_factory=list)  # (id, geometry, mapped class)
    pois: list = field(default_factory=list)  # (geometry, kinds tuple)
    highways: list = field(default_factory=list)  # (way id, highway class, [(ref, lon, lat)])


def _poi_kinds(tags) -> tuple:
    kinds = []
    if "shop" in tags:
        kinds.append("shop")
    if "office" in tags:
        kinds.append("office")
    amenity = tags.get("amenity")
    if amenity == "school":
        kinds.append("school")
    elif amenity == "university":
        kinds.append("university")
    return tuple(kinds)


def _area_id(a) -> tuple[str, int]:
    return ("w" if a.from_way() else "r"), a.orig_id()


def read_osm(path) -> OsmData:
    """Single pass over an OSM XML or PBF file."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    fab = osmium.geom.WKBFactory()
    data = OsmData()
    buildings = []
    try:
        for obj in osmium.FileProcessor(path).with_areas():
            tags = obj.tags
            if obj.is_node():
                kinds = _poi_kinds(tags)
                if kinds and obj.location.valid():
                    data.pois.append((shapely.Point(obj.location.lon, obj.location.lat), kinds))
            elif obj.is_way():
                hw = tags.get("highway")
                if hw is not None:
                    nodes = [(n.ref, n.lon, n.lat) for n in obj.nodes if n.location.valid()]
                    if len(nodes) >= 2:
                        data.highways.append((obj.id, hw, nodes))
            elif obj.is_area():
                is_building = "building" in tags and tags.get("building") != "no"
                lu = tags.get("landuse")
                kinds = _poi_kinds(tags)
                if not (is_building or lu or kinds):
                    continue
                try:
                    geom = shapely.from_wkb(fab.create_multipolygon(obj))
                except RuntimeError:
                    log.debug("skipping unassemblable area %s", obj.id)
                    continue
                if not geom.is_valid:
                    geom = shapely.make_valid(geom)
                kind, oid = _area_id(obj)
                if is_building:
                    buildings.append(((kind != "w", oid), f"{kind}{oid}", geom))
                if lu:
                    data.landuse.append((f"{kind}{oid}", geom, LANDUSE_MAP.get(lu, "none")))
                if kinds:
                    data.pois.append((geom, kinds))
    except RuntimeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    buildings.sort(key=lambda t: t[0])
    data.buildings = [(bid, g) for _, bid, g in buildings]
    data.highways.sort(key=lambda t: t[0])
    return data


def _as_osm(osm) -> OsmData:
    return osm if isinstance(osm, OsmData) else read_osm(osm)


# --------------------------------------------------------------------------
# Buildings


def extract_buildings(osm, area: AreaGeometry) -> list[Building]:
    """Build the building table for everything tagged ``building`` in ``area``.

    Land use comes from the intersecting land-use zone with the largest
    overlap; POI counts are the numbers of intersecting shop/office/school/
    university objects. Output order follows OSM ids.
    """
    data = _as_osm(osm)
    proj = area.projection()
    region = proj.project(area.geometry)
    focus = proj.project(area.focus)
    shapely.prepare(region)
    shapely.prepare(focus)

    ids, foot_ll, foot_xy = [], [], []
    for bid, geom in data.buildings:
        gxy = proj.project(geom)
        if gxy.is_empty or gxy.area <= 0 or not region.intersects(gxy):
            continue
        ids.append(bid)
        foot_ll.append(geom)
        foot_xy.append(gxy)
    if not ids:
        raise EmptyModelError("no buildings found inside the model area")

    foot_xy = np.array(foot_xy, dtype=object)
    n = len(ids)
    tree = STRtree(foot_xy)

    landuse = np.array(["none"] * n, dtype=object)
    if data.landuse:
        zones = np.array([proj.project(g) for _, g, _ in data.landuse], dtype=object)
        classes = [c for _, _, c in data.landuse]
        zi, bi = tree.query(zones, predicate="intersects")
        if len(bi):
            overlap = shapely.area(shapely.intersection(foot_xy[bi], zones[zi]))
            best = np.full(n, -1.0)
            # stable: first zone wins on equal overlap
            for b, z, ov in zip(bi, zi, overlap):
                if ov > best[b]:
                    best[b] = ov
                    landuse[b] = classes[z]

    counts = {k: np.zeros(n, dtype=int) for k in POI_KINDS}
    if data.pois:
        pgeoms = np.array([proj.project(g) for g, _ in data.pois], dtype=object)
        pi, bi = tree.query(pgeoms, predicate="intersects")
        for p, b in zip(pi, bi):
            for kind in data.pois[p][1]:
                counts[kind][b] += 1

    cents = shapely.centroid(foot_xy)
    cx, cy = shapely.get_x(cents), shapely.get_y(cents)
    lon, lat = proj.inverse(cx, cy)
    in_focus = shapely.contains_xy(focus, cx, cy) | shapely.intersects_xy(focus, cx, cy)
    areas = shapely.area(foot_xy)

    out = []
    for i in range(n):
        out.append(Building(
            id=ids[i],
            lon=float(lon[i]),
            lat=float(lat[i]),
            area=float(areas[i]),
            landuse=str(landuse[i]),
            n_shops=int(counts["shop"][i]),
            n_offices=int(counts["office"][i]),
            n_schools=int(counts["school"][i]),
            n_universities=int(counts["university"][i]),
            in_focus_area=bool(in_focus[i]),
            footprint=foot_ll[i],
        ))
    return out


def read_census(path, population_property: str = "population") -> list[CensusCell]:
    doc = _read_geojson(path)
    cells = []
    for i, feat in enumerate(_features(doc)):
        props = feat.get("properties") or {}
        if population_property not in props:
            raise SchemaError(f"{path}: feature {i} lacks numeric property {population_property!r}")
        try:
            pop = float(props[population_property])
        except (TypeError, ValueError):
            raise SchemaError(f"{path}: feature {i} has non-numeric {population_property!r}") from None
        if pop < 0:
            raise SchemaError(f"{path}: feature {i} has negative population")
        geom = shape(feat["geometry"])
        cells.append(CensusCell(geometry=geom, population=pop))
    return cells


def apply_census(buildings: list[Building], census, population_property: str = "population") -> list[Building]:
    """Split each census cell's population equally over the buildings it touches.

    ``census`` is a GeoJSON path or a list of :class:`CensusCell`. Buildings
    touched by no cell keep population 0. Returns the same list, mutated.
    """
    if census is None:
        return buildings
    cells = census if isinstance(census, list) else read_census(census, population_property)
    if any(b.footprint is None for b in buildings):
        raise ValueError("apply_census needs building footprints (use freshly extracted buildings)")
    foots = np.array([b.footprint for b in buildings], dtype=object)
    tree = STRtree(foots)
    pop = np.zeros(len(buildings))
    for cell in cells:
        hit = tree.query(cell.geometry, predicate="intersects")
        if len(hit):
            pop[hit] += cell.population / len(hit)
    for b, p in zip(buildings, pop):
        b.population = float(p)
    return buildings


def save_buildings(buildings: list[Building], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in sorted(buildings, key=_osm_sort_key):
            fh.write(json.dumps(b.to_record(), separators=(",", ":")) + "\n")


def load_buildings(path) -> list[Building]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Building.from_record(json.loads(line)))
    return out


def _osm_sort_key(b: Building):
    s = b.id
    if s[:1] in ("w", "r") and s[1:].lstrip("-").isdigit():
        return (0, s[0] != "w", int(s[1:]), "")
    return (1, False, 0, s)


def total_population(buildings) -> float:
    return float(sum(b.population for b in buildings))


def load_model_area(area_path, buffer_m: float = 0.0) -> AreaGeometry:
    area = parse_focus_area(Path(area_path))
    return buffer_area(area, buffer_m)
