"""Adaptive destination grid built with bisecting 2-means."""
from __future__ import annotations

import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import shapely

from . import PURPOSES
from .destination import attraction_table, feature_matrix
from .errors import ParseError

TIER_WIDTH_M = 10_000.0
GRID_SCHEMA = "mobgen.grid/1"


@dataclass
class GridCell:
    id: int
    members: list  # building indices
    lon: float
    lat: float
    tier: int = 0
    attraction: dict = field(default_factory=dict)  # purpose -> aggregated weight

    def to_record(self, building_ids=None) -> dict:
        return {
            "id": self.id,
            "members": [building_ids[m] for m in self.members] if building_ids else list(map(int, self.members)),
            "centroid": [self.lon, self.lat],
            "tier": self.tier,
            "attraction": {p: self.attraction[p] for p in PURPOSES if p in self.attraction},
        }


def _dispersion(pts: np.ndarray) -> float:
    return float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).sum())


def _two_means(pts: np.ndarray, max_iter: int = 100) -> np.ndarray | None:
    """Split ``pts`` in two with Lloyd iterations seeded at a far-apart pair.

    The seeds come from a double sweep (farthest point from the mean, then the
    farthest point from that one). Returns a boolean mask for the second half,
    or None when the points cannot be split.
    """
    c = pts.mean(axis=0)
    a = pts[np.argmax(((pts - c) ** 2).sum(axis=1))]
    b = pts[np.argmax(((pts - a) ** 2).sum(axis=1))]
    if np.allclose(a, b):
        return None
    centers = np.vstack([a, b])
    labels = None
    for _ in range(max_iter):
        d0 = ((pts - centers[0]) ** 2).sum(axis=1)
        d1 = ((pts - centers[1]) ** 2).sum(axis=1)
        new = d1 < d0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if labels.all() or not labels.any():
            return None
        centers = np.vstack([pts[~labels].mean(axis=0), pts[labels].mean(axis=0)])
    return labels


def mean_centroid_distance(points: np.ndarray, clusters) -> float:
    points = np.asarray(points, dtype=float)
    total = sum(_dispersion(points[c]) for c in clusters)
    return total / len(points)


def bisecting_kmeans(points, threshold: float, max_clusters: int | None = None) -> list[np.ndarray]:
    """Bisect until the mean point-to-centroid distance drops below ``threshold``.

    ``points`` are planar coordinates in meters. The cluster with the largest
    summed distance to its centroid is split first. Deterministic.
    Returns a list of index arrays.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        raise ValueError("bisecting_kmeans needs at least one point")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    idx = np.arange(n)
    disp = _dispersion(pts)
    heap = [(-disp, 0, idx)]
    counter = 1
    total = disp
    final = []
    while heap and total / n >= threshold:
        if max_clusters is not None and len(heap) + len(final) >= max_clusters:
            break
        neg, _, members = heapq.heappop(heap)
        mask = _two_means(pts[members])
        if mask is None:
            final.append(members)  # all points coincide
            continue
        left, right = members[~mask], members[mask]
        dl, dr = _dispersion(pts[left]), _dispersion(pts[right])
        total += dl + dr + neg
        for part, dp in ((left, dl), (right, dr)):
            heapq.heappush(heap, (-dp, counter, part))
            counter += 1
    clusters = final + [m for _, _, m in heap]
    clusters.sort(key=lambda m: int(m.min()))
    return clusters


def building_tiers(buildings, focus_xy, tier_width: float = TIER_WIDTH_M, xy=None) -> np.ndarray:
    """Tier 0 for focus-area buildings, k ≥ 1 for buffer buildings whose
    distance to the focus area lies in [(k-1)·10 km, k·10 km)."""
    tiers = np.zeros(len(buildings), dtype=int)
    outside = np.array([not b.in_focus_area for b in buildings])
    if outside.any():
        d = shapely.distance(focus_xy, shapely.points(xy[outside]))
        tiers[outside] = np.floor(d / tier_width).astype(int) + 1
    return tiers


def build_grid(buildings, area, base_threshold: float = 150.0, coeffs=None, threads: int = 1,
               tier_width: float = TIER_WIDTH_M) -> list[GridCell]:
    """Partition buildings into cells, coarsening by distance from the focus.

    Each tier is clustered on its own with threshold base·2^tier.
    """
    if not buildings:
        raise ValueError("build_grid needs at least one building")
    proj = area.projection()
    xy = proj.to_xy([b.lon for b in buildings], [b.lat for b in buildings])
    tiers = building_tiers(buildings, proj.project(area.focus), tier_width, xy)
    attr = attraction_table(feature_matrix(buildings), coeffs)

    def run(tier):
        sel = np.nonzero(tiers == tier)[0]
        return [(tier, sel[c]) for c in bisecting_kmeans(xy[sel], base_threshold * 2 ** tier)]

    levels = sorted(set(tiers.tolist()))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, levels))
    else:
        results = [run(t) for t in levels]

    lon = np.array([b.lon for b in buildings])
    lat = np.array([b.lat for b in buildings])
    cells = []
    for res in results:
        for tier, members in res:
            members = np.sort(members)
            agg = attr[members].sum(axis=0)
            cells.append(GridCell(
                id=len(cells),
                members=members.tolist(),
                lon=float(lon[members].mean()),
                lat=float(lat[members].mean()),
                tier=int(tier),
                attraction={p: float(agg[i]) for i, p in enumerate(PURPOSES)},
            ))
    return cells


def save_grid(cells, path, building_ids=None) -> None:
    doc = {"schema": GRID_SCHEMA, "cells": [c.to_record(building_ids) for c in cells]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_grid(path, building_ids=None) -> list[GridCell]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != GRID_SCHEMA:
        raise ParseError(f"{path}: unexpected grid schema {doc.get('schema')!r}")
    pos = {bid: i for i, bid in enumerate(building_ids)} if building_ids else None
    cells = []
    for rec in doc["cells"]:
        members = [pos[m] for m in rec["members"]] if pos else [int(m) for m in rec["members"]]
        cells.append(GridCell(id=int(rec["id"]), members=members, lon=rec["centroid"][0],
                              lat=rec["centroid"][1], tier=int(rec["tier"]),
                              attraction=dict(rec["attraction"])))
    return cells
