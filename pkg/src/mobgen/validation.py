"""Comparison of generated demand against a reference survey."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from .geo import LocalProjection
from .schedule import ACTIVITY_TYPES, DAY_MINUTES

MOVING = "moving"
STATES = ACTIVITY_TYPES + (MOVING,)
RESOLUTIONS = (500, 1000, 5000)


class Stop(NamedTuple):
    type: str
    stay: float | None  # minutes; None for the last activity of a day
    lon: float
    lat: float


# --------------------------------------------------------------------------
# Metrics


def _normalise(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("distribution has negative entries")
    s = p.sum()
    if s <= 0:
        raise ValueError("distribution has no mass")
    return p / s


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats, within [0, ln 2]."""
    p, q = _normalise(p), _normalise(q)
    if p.shape != q.shape:
        raise ValueError("distributions differ in support size")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    js = 0.5 * (kl(p) + kl(q))
    return min(max(js, 0.0), math.log(2))


def r_squared(pred, target) -> float:
    """Coefficient of determination of ``pred`` against ``target`` (can be < 0)."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    ss_res = float(np.sum((target - pred) ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("nan")
    return 1.0 - ss_res / ss_tot


def mae_percent(pred, target) -> float:
    """Mean absolute share difference in percentage points."""
    return 100.0 * float(np.mean(np.abs(np.asarray(pred, float) - np.asarray(target, float))))


@dataclass
class MetricReport:
    r2: float
    mae: float
    js: float
    n_zones: int

    def to_dict(self) -> dict:
        return asdict(self)


def compare_shares(model_counts: dict, survey_counts: dict) -> MetricReport:
    """Metrics over the union of zones with at least one trip in either set."""
    zones = sorted(set(model_counts) | set(survey_counts))
    if not zones:
        raise ValueError("no trips to compare")
    m = _normalise([model_counts.get(z, 0) for z in zones])
    s = _normalise([survey_counts.get(z, 0) for z in zones])
    return MetricReport(r_squared(m, s), mae_percent(m, s), js_divergence(m, s), len(zones))


# --------------------------------------------------------------------------
# Validation grid


class ValidationGrid:
    """Regular square lattice anchored at the lower-left corner of a bounding box."""

    def __init__(self, bbox, resolution: float):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        lon_min, lat_min, lon_max, lat_max = bbox
        self.proj = LocalProjection((lon_min + lon_max) / 2, (lat_min + lat_max) / 2)
        corners = self.proj.to_xy([lon_min, lon_max, lon_min, lon_max], [lat_min, lat_min, lat_max, lat_max])
        self.x0, self.y0 = corners.min(axis=0)
        self.resolution = float(resolution)

    @classmethod
    def covering(cls, *point_sets, resolution: float) -> "ValidationGrid":
        pts = np.vstack([np.asarray(p, float).reshape(-1, 2) for p in point_sets if len(p)])
        return cls((*pts.min(axis=0), *pts.max(axis=0)), resolution)

    def zone(self, lonlat) -> list:
        pts = np.asarray(lonlat, float).reshape(-1, 2)
        xy = self.proj.to_xy(pts[:, 0], pts[:, 1])
        ij = np.floor((xy - [self.x0, self.y0]) / self.resolution).astype(np.int64)
        return [tuple(r) for r in ij.tolist()]


def _check(trips, name):
    if len(trips) == 0:
        raise ValueError(f"{name} trip set is empty")
    return np.asarray(trips, float)


def zonal_attraction(model_dest, survey_dest, resolution: float, bbox=None) -> MetricReport:
    """Share of trips ending in each zone; inputs are (n, 2) lon/lat arrays."""
    m, s = _check(model_dest, "model"), _check(survey_dest, "survey")
    grid = ValidationGrid(bbox, resolution) if bbox is not None else \
        ValidationGrid.covering(m, s, resolution=resolution)
    return compare_shares(Counter(grid.zone(m)), Counter(grid.zone(s)))


def od_metrics(model_od, survey_od, resolution: float, bbox=None) -> MetricReport:
    """Origin-destination shares; inputs are (n, 4) [lon_o, lat_o, lon_d, lat_d] arrays."""
    m, s = _check(model_od, "model").reshape(-1, 4), _check(survey_od, "survey").reshape(-1, 4)
    grid = ValidationGrid(bbox, resolution) if bbox is not None else \
        ValidationGrid.covering(m[:, :2], m[:, 2:], s[:, :2], s[:, 2:], resolution=resolution)

    def pairs(a):
        return Counter(zip(grid.zone(a[:, :2]), grid.zone(a[:, 2:])))

    return compare_shares(pairs(m), pairs(s))


# --------------------------------------------------------------------------
# Trips and distances from schedules


def plans_to_stops(plans_by_agent, coords) -> list:
    """DayPlans (with building locations) to per-agent lists of per-day stops."""
    coords = np.asarray(coords, float)
    return [[[Stop(a.type, a.stay, float(coords[a.location, 0]), float(coords[a.location, 1]))
              for a in plan.activities] for plan in plans] for plans in plans_by_agent]


def schedule_trips(agents) -> np.ndarray:
    """(n, 5) array [lon_o, lat_o, lon_d, lat_d, purpose index] of all trips."""
    out = []
    for days in agents:
        for day in days:
            for a, b in zip(day, day[1:]):
                out.append((a.lon, a.lat, b.lon, b.lat, ACTIVITY_TYPES.index(b.type)))
    return np.asarray(out, float).reshape(-1, 5)


def daily_distances(agents, router) -> np.ndarray:
    """Driven km per agent-day (all trips routed on the shortest path)."""
    out = []
    for days in agents:
        for day in days:
            out.append(sum(router.distance((a.lon, a.lat), (b.lon, b.lat)) for a, b in zip(day, day[1:])) / 1000)
    return np.asarray(out, float)


@dataclass
class DistanceSummary:
    q25: float
    median: float
    q75: float
    mean: float
    ci95: float  # half-width
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize_distances(km) -> DistanceSummary:
    km = np.asarray(km, float)
    if km.size == 0:
        raise ValueError("no agent-days")
    q = np.quantile(km, [0.25, 0.5, 0.75])
    half = float(stats.norm.ppf(0.975) * km.std(ddof=1) / math.sqrt(km.size)) if km.size > 1 else 0.0
    return DistanceSummary(float(q[0]), float(q[1]), float(q[2]), float(km.mean()), half, int(km.size))


def daily_distance(agents, router) -> DistanceSummary:
    return summarize_distances(daily_distances(agents, router))


# --------------------------------------------------------------------------
# Temporal activity shares


def schedule_timeline(days, router) -> list:
    """(state, start, end) segments in minutes from the first midnight.

    Each activity is followed by the travel time to the next one; the last
    activity of a day lasts until midnight.
    """
    segs = []
    for d, day in enumerate(days):
        t0, t_end = d * DAY_MINUTES, (d + 1) * DAY_MINUTES
        t = t0
        for i, a in enumerate(day):
            if i == len(day) - 1:
                segs.append((a.type, t, t_end))
                break
            segs.append((a.type, t, t + a.stay))
            t += a.stay
            b = day[i + 1]
            travel = router.travel_time((a.lon, a.lat), (b.lon, b.lat)) / 60.0
            segs.append((MOVING, t, t + travel))
            t += travel
    return [(s, a, min(b, len(days) * DAY_MINUTES)) for s, a, b in segs if b > a]


def survey_timeline(day) -> list:
    """Segments of one surveyed person-day (rows of a single person, any order)."""
    rows = sorted(day, key=lambda r: r.trip_index)
    anchor = rows[0] if rows[0].trip_index == 0 else None
    moves = [r for r in rows if r.trip_index > 0]
    state = anchor.purpose if anchor else "home"
    segs, t = [], 0.0
    for r in moves:
        segs.append((state, t, r.start_min))
        segs.append((MOVING, r.start_min, r.end_min))
        state, t = r.purpose, r.end_min
    segs.append((state, t, DAY_MINUTES))
    return [(s, a, min(b, DAY_MINUTES)) for s, a, b in segs if min(b, DAY_MINUTES) > a]


def temporal_shares(timelines, step: float = 15.0, horizon: float | None = None):
    """Fraction of agents in each state at t = 0, step, 2·step, ...

    Returns (times, shares) with shares of shape (steps, len(STATES)). An agent
    outside every segment at some time (a gap) is counted at home.
    """
    if not timelines:
        raise ValueError("no timelines")
    if horizon is None:
        horizon = max(b for tl in timelines for _, _, b in tl)
    times = np.arange(0.0, horizon, step)
    counts = np.zeros((len(times), len(STATES)))
    home = STATES.index("home")
    for tl in timelines:
        covered = np.zeros(len(times), dtype=bool)
        for s, a, b in tl:
            sel = slice(np.searchsorted(times, a, side="left"), np.searchsorted(times, b, side="left"))
            idx = np.arange(len(times))[sel]
            idx = idx[~covered[idx]]
            counts[idx, STATES.index(s)] += 1
            covered[idx] = True
        counts[~covered, home] += 1
    return times, counts / len(timelines)


def temporal_difference(shares_a, shares_b) -> float:
    return float(np.max(np.abs(np.asarray(shares_a) - np.asarray(shares_b))))


# --------------------------------------------------------------------------
# Reports


def format_table(rows) -> str:
    """Aligned text table with columns Activity, Resolution, R², MAE, Jensen-Shannon.

    ``rows`` are (activity, resolution in m, MetricReport).
    """
    head = ("Activity", "Resolution", "R²", "MAE", "Jensen-Shannon")
    body = [(act, f"{int(res)} m", f"{r.r2:.3f}", f"{r.mae:.3f}", f"{r.js:.3f}") for act, res, r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    line = "  ".join(h.ljust(w) for h, w in zip(head, widths))
    out = [line, "-" * len(line)]
    for b in body:
        out.append("  ".join([b[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(b[1:], widths[1:])]))
    return "\n".join(out)
