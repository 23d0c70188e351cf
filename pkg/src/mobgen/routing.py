"""Road graph, shortest paths and the cell-to-cell distance matrix."""
from __future__ import annotations

import heapq
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyGraphError, ParseError
from .geo import haversine

log = logging.getLogger(__name__)

DRIVABLE_CLASSES = frozenset({
    "motorway", "trunk", "primary", "secondary", "tertiary",
    "unclassified", "residential", "service",
    "motorway_link", "trunk_link", "primary_link", "secondary_link", "tertiary_link",
})

# km/h per highway class, used only for travel times in temporal validation.
DEFAULT_SPEEDS_KMH = {
    "motorway": 120.0, "motorway_link": 60.0,
    "trunk": 90.0, "trunk_link": 50.0,
    "primary": 70.0, "primary_link": 40.0,
    "secondary": 60.0, "secondary_link": 40.0,
    "tertiary": 50.0, "tertiary_link": 30.0,
    "unclassified": 40.0, "residential": 30.0, "service": 15.0,
}
BEELINE_SPEED_KMH = 40.0

DEFAULT_LIMIT_M = 300_000.0
BIN_WIDTH_M = 50.0

ROUTED, BEELINE = "routed", "beeline"


class Route(NamedTuple):
    distance: float
    method: str
    time_s: float = math.nan


@dataclass
class RoadGraph:
    """Undirected road graph in CSR form.

    ``lon``/``lat`` are per node; ``indptr``/``indices``/``length``/``time``
    form the adjacency (both directions stored).
    """

    node_ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    length: np.ndarray
    time: np.ndarray

    def __post_init__(self):
        self._kd = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def edges(self):
        """Unique (u, v, length) triples with u < v."""
        out = []
        for u in range(self.n_nodes):
            for k in range(self.indptr[u], self.indptr[u + 1]):
                v = self.indices[k]
                if u < v:
                    out.append((u, int(v), float(self.length[k])))
        return out

    def _tree(self):
        if self._kd is None:
            # unit-sphere coordinates: chord order == great-circle order
            lam, phi = np.radians(self.lon), np.radians(self.lat)
            xyz = np.column_stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])
            self._kd = cKDTree(xyz)
        return self._kd

    def snap(self, lon, lat) -> np.ndarray:
        """Index of the nearest graph node (haversine) for each point."""
        lam, phi = np.radians(np.atleast_1d(lon)), np.radians(np.atleast_1d(lat))
        xyz = np.column_stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])
        _, idx = self._tree().query(xyz)
        return np.atleast_1d(idx)

    @classmethod
    def from_edges(cls, lon, lat, edges, node_ids=None) -> "RoadGraph":
        """Build from node coordinates and (u, v, length[, time]) tuples.

        Parallel edges collapse to the shortest one; self loops are dropped.
        """
        n = len(lon)
        best: dict[tuple[int, int], tuple[float, float]] = {}
        for e in edges:
            u, v, w = int(e[0]), int(e[1]), float(e[2])
            t = float(e[3]) if len(e) > 3 else w / (BEELINE_SPEED_KMH / 3.6)
            if u == v:
                continue
            if w <= 0:
                raise ValueError(f"edge ({u}, {v}) has non-positive length {w}")
            key = (u, v) if u < v else (v, u)
            if key not in best or w < best[key][0]:
                best[key] = (w, t)
        rows, cols, ws, ts = [], [], [], []
        for (u, v), (w, t) in best.items():
            rows += [u, v]
            cols += [v, u]
            ws += [w, w]
            ts += [t, t]
        rows = np.asarray(rows, dtype=np.int64)
        order = np.lexsort((np.asarray(cols), rows)) if len(rows) else np.zeros(0, dtype=np.int64)
        rows = rows[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(
            node_ids=np.arange(n) if node_ids is None else np.asarray(node_ids),
            lon=np.asarray(lon, dtype=float),
            lat=np.asarray(lat, dtype=float),
            indptr=indptr,
            indices=np.asarray(cols, dtype=np.int64)[order],
            length=np.asarray(ws, dtype=float)[order],
            time=np.asarray(ts, dtype=float)[order],
        )


def build_road_graph(osm, drivable=DRIVABLE_CLASSES, speeds=None) -> RoadGraph:
    """Graph over all drivable ``highway`` ways; edge length is the haversine
    length of each way segment."""
    from .ingest import OsmData, read_osm

    data = osm if isinstance(osm, OsmData) else read_osm(osm)
    speeds = {**DEFAULT_SPEEDS_KMH, **(speeds or {})}
    index: dict[int, int] = {}
    lon, lat, edges = [], [], []
    for _, hw, nodes in data.highways:
        if hw not in drivable:
            continue
        v_ms = speeds.get(hw, BEELINE_SPEED_KMH) / 3.6
        prev = None
        for ref, x, y in nodes:
            if ref not in index:
                index[ref] = len(lon)
                lon.append(x)
                lat.append(y)
            cur = index[ref]
            if prev is not None and prev != cur:
                w = haversine(lon[prev], lat[prev], x, y)
                if w > 0:
                    edges.append((prev, cur, w, w / v_ms))
            prev = cur
    if not edges:
        raise EmptyGraphError("OSM data contains no drivable ways")
    ids = np.empty(len(index), dtype=np.int64)
    for ref, i in index.items():
        ids[i] = ref
    return RoadGraph.from_edges(lon, lat, edges, node_ids=ids)


def dijkstra(g: RoadGraph, source: int, limit: float = math.inf, targets=None):
    """Single-source shortest path lengths (meters) and travel times (s).

    Nodes farther than ``limit`` are left at ``inf``. If ``targets`` is
    given, the sweep stops once all of them are settled.
    """
    n = g.n_nodes
    dist = np.full(n, math.inf)
    time = np.full(n, math.inf)
    dist[source] = 0.0
    time[source] = 0.0
    done = np.zeros(n, dtype=bool)
    remaining = None if targets is None else set(int(t) for t in targets)
    indptr, indices, length, ttime = g.indptr, g.indices, g.length, g.time
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        if d > limit:
            break
        done[u] = True
        if remaining is not None:
            remaining.discard(u)
            if not remaining:
                break
        tu = time[u]
        for k in range(indptr[u], indptr[u + 1]):
            v = indices[k]
            if done[v]:
                continue
            nd = d + length[k]
            if nd < dist[v]:
                dist[v] = nd
                time[v] = tu + ttime[k]
                heapq.heappush(heap, (nd, v))
    dist[~done] = math.inf
    time[~done] = math.inf
    return dist, time


def shortest_distance(g: RoadGraph, origin, destination) -> Route:
    """Routed distance between two (lon, lat) points via their nearest nodes.

    Falls back to the haversine beeline if the snapped nodes are disconnected.
    """
    if g.n_nodes == 0:
        raise EmptyGraphError("empty road graph")
    a, b = g.snap([origin[0], destination[0]], [origin[1], destination[1]])
    if a == b:
        return Route(0.0, ROUTED, 0.0)
    dist, time = dijkstra(g, int(a), targets=[int(b)])
    if math.isfinite(dist[b]):
        return Route(float(dist[b]), ROUTED, float(time[b]))
    d = haversine(origin[0], origin[1], destination[0], destination[1])
    return Route(d, BEELINE, d / (BEELINE_SPEED_KMH / 3.6))


class DistanceMatrix:
    """Dense cell-to-cell distances in meters with a routed/beeline flag."""

    MAGIC = b"MGDM"
    VERSION = 1
    _HEADER = struct.Struct("<4sHHIf")

    def __init__(self, ids, d, routed, bin_width: float = BIN_WIDTH_M, time=None):
        self.ids = list(ids)
        self.d = np.asarray(d, dtype=float)
        self.routed = np.asarray(routed, dtype=bool)
        self.bin_width = float(bin_width)
        self.time = None if time is None else np.asarray(time, dtype=float)

    def __len__(self):
        return len(self.ids)

    def row(self, i: int) -> np.ndarray:
        return self.d[i]

    def method(self, s: int, t: int) -> str:
        return ROUTED if self.routed[s, t] else BEELINE

    def save(self, path) -> None:
        n = len(self.ids)
        with open(path, "wb") as fh:
            fh.write(self._HEADER.pack(self.MAGIC, self.VERSION, 0, n, self.bin_width))
            fh.write(self.d.astype("<f4").tobytes(order="C"))
            fh.write(np.packbits(self.routed.ravel()).tobytes())

    @classmethod
    def load(cls, path, ids=None) -> "DistanceMatrix":
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, version, _, n, width = cls._HEADER.unpack_from(raw, 0)
        if magic != cls.MAGIC or version != cls.VERSION:
            raise ParseError(f"{path}: not a mobgen distance matrix (v{cls.VERSION})")
        off = cls._HEADER.size
        d = np.frombuffer(raw, dtype="<f4", count=n * n, offset=off).reshape(n, n).astype(float)
        off += 4 * n * n
        bits = np.frombuffer(raw, dtype=np.uint8, offset=off)
        routed = np.unpackbits(bits, count=n * n).astype(bool).reshape(n, n)
        return cls(range(n) if ids is None else ids, d, routed, width)


class BeelineDistances:
    """Drop-in for :class:`DistanceMatrix` that computes haversine rows on demand."""

    def __init__(self, ids, lon, lat, bin_width: float = BIN_WIDTH_M):
        self.ids = list(ids)
        self.lon = np.asarray(lon, dtype=float)
        self.lat = np.asarray(lat, dtype=float)
        self.bin_width = bin_width

    def __len__(self):
        return len(self.ids)

    def row(self, i: int) -> np.ndarray:
        return haversine(self.lon[i], self.lat[i], self.lon, self.lat)

    @property
    def d(self) -> np.ndarray:
        return haversine(self.lon[:, None], self.lat[:, None], self.lon[None, :], self.lat[None, :])

    def method(self, s, t) -> str:
        return BEELINE


def distance_matrix(g: RoadGraph, cells, limit: float = DEFAULT_LIMIT_M, threads: int = 1) -> DistanceMatrix:
    """Routed distances between cell centroids, one bounded sweep per source.

    Pairs beyond ``limit`` or unreachable get the centroid beeline.
    ``cells`` are objects with ``id``, ``lon`` and ``lat``.
    """
    if not cells:
        raise ValueError("distance_matrix needs at least one cell")
    lon = np.array([c.lon for c in cells])
    lat = np.array([c.lat for c in cells])
    snapped = g.snap(lon, lat)
    n = len(cells)
    d = np.empty((n, n))
    t = np.empty((n, n))
    routed = np.zeros((n, n), dtype=bool)
    beeline_speed = BEELINE_SPEED_KMH / 3.6

    def fill(s):
        dist, time = dijkstra(g, int(snapped[s]), limit=limit, targets=np.unique(snapped))
        row = dist[snapped]
        ok = np.isfinite(row) & (row <= limit)
        bee = haversine(lon[s], lat[s], lon, lat)
        d[s] = np.where(ok, row, bee)
        t[s] = np.where(ok, time[snapped], bee / beeline_speed)
        routed[s] = ok
        d[s, s] = 0.0
        t[s, s] = 0.0
        routed[s, s] = True

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, range(n)))
    else:
        for s in range(n):
            fill(s)
    return DistanceMatrix([c.id for c in cells], d, routed, time=t)


def digitize_distance(d: float, bin_width: float = BIN_WIDTH_M) -> int:
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if d < 0:
        raise ValueError(f"distance must be >= 0, got {d}")
    return int(math.floor(d / bin_width))


def digitize_distances(d, bin_width: float = BIN_WIDTH_M) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be >= 0")
    return np.floor(d / bin_width).astype(np.int64)


def bin_center(k, bin_width: float = BIN_WIDTH_M):
    """Representative distance of bin ``k``."""
    return (np.asarray(k) + 0.5) * bin_width if np.ndim(k) else (k + 0.5) * bin_width


class GraphRouter:
    """Point-to-point router with a small memo, used by validation."""

    def __init__(self, g: RoadGraph, limit: float = DEFAULT_LIMIT_M):
        self.g = g
        self.limit = limit
        self._rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def route(self, a, b) -> Route:
        ia, ib = (int(i) for i in self.g.snap([a[0], b[0]], [a[1], b[1]]))
        if ia == ib:
            return Route(0.0, ROUTED, 0.0)
        if ia not in self._rows:
            self._rows[ia] = dijkstra(self.g, ia, limit=self.limit)
        dist, time = self._rows[ia]
        if math.isfinite(dist[ib]):
            return Route(float(dist[ib]), ROUTED, float(time[ib]))
        bee = haversine(a[0], a[1], b[0], b[1])
        return Route(bee, BEELINE, bee / (BEELINE_SPEED_KMH / 3.6))

    def distance(self, a, b) -> float:
        return self.route(a, b).distance

    def travel_time(self, a, b) -> float:
        return self.route(a, b).time_s


class BeelineRouter:
    def __init__(self, speed_kmh: float = BEELINE_SPEED_KMH, detour: float = 1.0):
        self.speed = speed_kmh / 3.6
        self.detour = detour

    def distance(self, a, b) -> float:
        return self.detour * haversine(a[0], a[1], b[0], b[1])

    def travel_time(self, a, b) -> float:
        return self.distance(a, b) / self.speed
