"""Synthetic geometry, truth bundle and trip-diary generator.

These stand in for a real survey: data drawn from a known bundle lets the
calibration code be checked against the parameters that produced it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import shapely

from . import PURPOSES
from .bundle import CalibrationBundle
from .calibration import CellTable, SurveyTrip
from .destination import (DEFAULT_ATTRACTION, DEFAULT_DETERRENCE, FEATURES, DestinationChooser,
                          choice_probabilities, sample_index)
from .geo import LocalProjection
from .ingest import AreaGeometry, Building
from .population import HOM_GROUPS, UNDEFINED, SocioDistribution, SocioFeatures
from .routing import BeelineDistances
from .schedule import WEEKDAYS, ChainDistribution, ChainTable, DwellMixture, DwellTable, sample_dwell_times

CITY_LON, CITY_LAT = 9.9, 49.8
SURVEY_SPEED_KMH = 30.0
_LANDUSES = ("residential", "industrial", "commercial", "none")


# --------------------------------------------------------------------------
# Geometry


def _lattice_lonlat(n: int, spacing: float, lon0: float, lat0: float):
    proj = LocalProjection(lon0, lat0)
    off = (np.arange(n) - (n - 1) / 2) * spacing
    x, y = np.meshgrid(off, off[::-1])
    lon, lat = proj.inverse(x.ravel(), y.ravel())
    return np.asarray(lon), np.asarray(lat), x.ravel(), y.ravel()


@dataclass
class SyntheticCity:
    """Deterministic square lattice of cells with planted features.

    Density falls off with distance from the centre; commercial use and
    shops concentrate in the core, industry on one side, schools are sparse.
    """

    table: CellTable
    x: np.ndarray
    y: np.ndarray
    spacing: float

    @classmethod
    def build(cls, n: int = 32, spacing: float = 500.0, seed: int = 0,
              lon0: float = CITY_LON, lat0: float = CITY_LAT) -> "SyntheticCity":
        rng = np.random.default_rng(seed)
        lon, lat, x, y = _lattice_lonlat(n, spacing, lon0, lat0)
        r_km = np.hypot(x, y) / 1000.0
        rho = np.exp(-r_km / 3.0)
        n_cells = n * n
        nb = 2 + rng.poisson(30 * rho)
        # landuse mix per cell: commercial core, industry east, residential elsewhere
        p_com = 0.05 + 0.5 * rho
        p_ind = np.where(x > spacing * n / 5, 0.35, 0.03) * (1 - rho)
        p_none = np.full(n_cells, 0.1)
        p_res = np.clip(1 - p_com - p_ind - p_none, 0.05, None)
        mix = np.column_stack([p_res, p_ind, p_com, p_none])
        mix /= mix.sum(axis=1, keepdims=True)
        counts = np.vstack([rng.multinomial(k, m) for k, m in zip(nb, mix)])
        mean_area = np.array([180.0, 900.0, 450.0, 120.0])
        areas = np.vstack([
            [rng.lognormal(np.log(mean_area[j]) - 0.18, 0.6, size=c).sum() for j, c in enumerate(row)]
            for row in counts])
        feats = np.zeros((n_cells, len(FEATURES)))
        feats[:, 0:4] = areas
        feats[:, 4] = rng.poisson(4 * rho * (counts[:, 2] + 0.5 * counts[:, 1]) / np.maximum(nb, 1) + 0.05)
        feats[:, 5] = rng.poisson(6 * rho * counts[:, 2] / np.maximum(nb, 1) + 0.1 * rho)
        feats[:, 6] = rng.random(n_cells) < 0.03 + 0.05 * rho
        feats[:, 7] = rng.random(n_cells) < 0.01 * rho
        feats[:, 8:12] = counts
        population = np.round(areas[:, 0] * 0.025 + 0.5 * counts[:, 3], 3)
        ids = list(range(n_cells))
        return cls(CellTable(ids, lon, lat, feats, nb, population), x, y, spacing)

    def __len__(self):
        return len(self.table)

    def distances(self) -> BeelineDistances:
        t = self.table
        return BeelineDistances(t.ids, t.lon, t.lat)

    def attraction(self, coeffs=None) -> np.ndarray:
        """Per-cell attraction for every purpose, shape (cells, purposes)."""
        coeffs = DEFAULT_ATTRACTION if coeffs is None else coeffs
        return np.column_stack([self.table.attraction(coeffs[p]) for p in PURPOSES])

    def chooser(self, coeffs=None, deterrence=None) -> DestinationChooser:
        """Cell-level chooser: each cell is a single alternative."""
        n = len(self)
        det = dict(DEFAULT_DETERRENCE if deterrence is None else deterrence)
        return DestinationChooser(self.attraction(coeffs), [np.array([i]) for i in range(n)],
                                  np.arange(n), self.distances(), det)


def synthetic_town(n: int = 200, seed: int = 0, extent: float = 2500.0,
                   lon0: float = CITY_LON, lat0: float = CITY_LAT):
    """``n`` buildings in a few neighbourhoods. Returns (buildings, focus area)."""
    rng = np.random.default_rng(seed)
    proj = LocalProjection(lon0, lat0)
    k = max(1, min(6, n // 30))
    centres = rng.uniform(-extent / 2, extent / 2, size=(k, 2))
    which = rng.integers(0, k, size=n)
    xy = centres[which] + rng.normal(0, extent / 8, size=(n, 2))
    lon, lat = proj.inverse(xy[:, 0], xy[:, 1])
    landuse = rng.choice(_LANDUSES, size=n, p=[0.6, 0.1, 0.2, 0.1])
    buildings = []
    for i in range(n):
        lu = str(landuse[i])
        com = lu == "commercial"
        buildings.append(Building(
            id=f"w{i + 1}", lon=float(lon[i]), lat=float(lat[i]),
            area=float(rng.lognormal(np.log(200), 0.5)),
            population=float(rng.integers(1, 40)) if lu == "residential" else 0.0,
            landuse=lu,
            n_shops=int(rng.poisson(1.5 if com else 0.05)),
            n_offices=int(rng.poisson(1.0 if com else 0.1)),
            n_schools=int(rng.random() < 0.02),
            n_universities=int(rng.random() < 0.005),
        ))
    hull = shapely.MultiPoint(list(zip(lon, lat))).convex_hull.buffer(0.002)
    return buildings, AreaGeometry(hull)


# --------------------------------------------------------------------------
# Truth bundle

_BASE_CHAINS = {
    "H": 0.26, "HWH": 0.18, "HSH": 0.12, "HOH": 0.14, "HCH": 0.07, "HWSH": 0.05, "HOSH": 0.04,
    "HWOH": 0.04, "HSOH": 0.03, "HOHOH": 0.03, "HSHOH": 0.02, "OH": 0.01, "HO": 0.01,
}
_CODE = {"H": "home", "W": "work", "C": "school", "S": "shopping", "O": "other"}
# typical stay (hours) when the activity is not first in the chain
_STAY = {"home": 3.0, "work": 8.5, "school": 6.0, "shopping": 0.8, "other": 2.0}
_GROUP_TILT = {
    "working": {"W": 2.5, "C": 0.2},
    "non_working": {"W": 0.05, "C": 0.05, "S": 1.3, "O": 1.3},
    "student": {"W": 0.2, "C": 4.0},
}
_WEEKEND_TILT = {"W": 0.3, "C": 0.05, "S": 1.2}


def _decode(code: str) -> tuple:
    return tuple(_CODE[c] for c in code)


def _tilted(tilts) -> dict:
    w = {}
    for code, p in _BASE_CHAINS.items():
        for tilt in tilts:
            for c, f in tilt.items():
                if c in code:
                    p *= f
        w[code] = p
    s = sum(w.values())
    return {k: v / s for k, v in w.items()}


def _dwell_truth(chain: tuple) -> DwellMixture | None:
    if len(chain) <= 1:
        return None
    nxt = chain[1]
    if chain == ("home", "shopping", "home"):
        mean = np.array([10.5, 1.3])
    else:
        first = 7.5 if nxt in ("work", "school") else 9.5
        if chain[0] != "home":
            first = 2.0
        mean = np.array([first] + [_STAY[a] for a in chain[1:-1]])
    alt = mean * np.r_[1.15, np.full(len(mean) - 1, 0.8)]
    sd = np.maximum(0.25, 0.15 * mean)
    cov = np.diag(sd ** 2)
    return DwellMixture([0.65, 0.35], [mean, alt], [cov, cov])


def truth_bundle(chains=None, sample_count: int = 10_000) -> CalibrationBundle:
    """Published destination parameters plus hand-set chain and dwell tables.

    ``chains`` overrides the global chain distribution (dict chain -> p) and
    disables the group/weekday variants.
    """
    table = ChainTable()
    dwell = DwellTable()

    def add(key, dist):
        seq = [_decode(c) if isinstance(c, str) else tuple(c) for c in dist]
        table.dists[key] = ChainDistribution(key, seq, list(dist.values()), sample_count)
        marg = {}
        for c, p in zip(seq, dist.values()):
            marg[len(c)] = marg.get(len(c), 0.0) + p
        table.length_marginals[key] = marg

    if chains is not None:
        add((UNDEFINED,) * 4, chains)
    else:
        for g in HOM_GROUPS:
            for wd in WEEKDAYS + (UNDEFINED,):
                tilts = ([_GROUP_TILT[g]] if g != UNDEFINED else []) + \
                        ([_WEEKEND_TILT] if wd in ("sa", "su") else [])
                add((UNDEFINED, g, UNDEFINED, wd), _tilted(tilts))
    seen = {c for d in table.dists.values() for c in d.chains}
    for c in seen:
        m = _dwell_truth(c)
        if m is not None:
            dwell.mixtures[((UNDEFINED,) * 4, c)] = m
    return CalibrationBundle(chains=table, dwell=dwell, meta={"source": "synthetic truth"})


DEFAULT_SOCIO = SocioDistribution([
    ("0-40", "student", "car_none", 0.12), ("0-40", "working", "car_full", 0.16),
    ("0-40", "working", "car_mixed", 0.10), ("40-60", "working", "car_full", 0.22),
    ("40-60", "non_working", "car_mixed", 0.08), ("60-100", "non_working", "car_full", 0.17),
    ("60-100", "non_working", "car_none", 0.10), ("0-40", "non_working", "car_none", 0.05),
])


# --------------------------------------------------------------------------
# Survey generation


def generate_synthetic_survey(truth: CalibrationBundle, city: SyntheticCity, n: int, rng,
                              socio: SocioDistribution | None = None, weekday: str | None = None,
                              speed_kmh: float = SURVEY_SPEED_KMH) -> list[SurveyTrip]:
    """``n`` one-day trip diaries drawn from the forward model of ``truth``.

    Homes follow cell population; work and school are drawn once from home;
    other destinations from the previous activity's cell. ``weekday=None``
    draws a weekday per person.
    """
    chooser = city.chooser(truth.attraction, truth.deterrence)
    dist = chooser.dmat
    pop_cdf = np.cumsum(city.table.population)
    speed = speed_kmh * 1000.0 / 60.0  # m per minute
    rows = []
    for p in range(n):
        feats = socio.sample(rng) if socio is not None else SocioFeatures()
        wd = weekday if weekday is not None else WEEKDAYS[int(rng.integers(7))]
        key = feats.as_tuple() + (wd,)
        d = truth.chains.select(key)
        chain = d.chains[sample_index(np.cumsum(d.probs), rng)]
        dwell = sample_dwell_times(truth.dwell.lookup(key, chain), rng)
        home = sample_index(pop_cdf, rng) if pop_cdf[-1] > 0 else chooser.choose_without_distance("home", rng)
        fixed = {}
        locs = []
        for i, act in enumerate(chain):
            ref = home if i == 0 else locs[-1]
            if act == "home":
                loc = home
            elif act in ("work", "school"):
                if act not in fixed:
                    fixed[act] = chooser.choose(home, act, rng)
                loc = fixed[act]
            else:
                loc = chooser.choose(ref, act, rng)
            locs.append(loc)
        pid = f"p{p}"
        rows.append(SurveyTrip(pid, feats, wd, 0, chain[0], None, int(locs[0]), 0.0, 0.0))
        t = 0.0
        for j in range(1, len(chain)):
            depart = t + dwell[j - 1]
            arrive = depart + dist.row(locs[j - 1])[locs[j]] / speed
            rows.append(SurveyTrip(pid, feats, wd, j, chain[j], int(locs[j - 1]), int(locs[j]),
                                   round(depart, 3), round(arrive, 3)))
            t = arrive
    return rows


def sample_destinations(city: SyntheticCity, theta, n: int, rng) -> np.ndarray:
    """Destination cells with P ∝ attraction alone (no origin)."""
    cdf = np.cumsum(city.table.attraction(theta))
    return np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(cdf) - 1)


def sample_od_trips(city: SyntheticCity, theta, det, n: int, rng, origins: str = "uniform"):
    """(origin, destination) cell pairs from the distance-aware logit.

    Origins are uniform over cells or, with ``origins="population"``,
    proportional to population.
    """
    t = city.table
    if origins == "population":
        cdf = np.cumsum(t.population)
        o = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(t) - 1)
    else:
        o = rng.integers(0, len(t), size=n)
    attr = t.attraction(theta)
    dm = city.distances()
    u = rng.random(n)
    dest = np.empty(n, dtype=np.int64)
    for src in np.unique(o):
        sel = o == src
        cdf = np.cumsum(choice_probabilities(attr, dm.row(src), det))
        dest[sel] = np.minimum(np.searchsorted(cdf, u[sel] * cdf[-1], side="right"), len(t) - 1)
    return o, dest


def make_default_bundle(n: int = 30_000, seed: int = 0) -> CalibrationBundle:
    """Published destination parameters with chain and dwell tables fitted to
    a synthetic survey. This is what ships as the default bundle."""
    from .calibration import build_chain_tables, fit_dwell_mixtures, key_members, person_days

    city = SyntheticCity.build(seed=seed)
    survey = generate_synthetic_survey(truth_bundle(), city, n, np.random.default_rng(seed), socio=DEFAULT_SOCIO)
    days = person_days(survey)
    members = key_members(days)
    chains = build_chain_tables(days, members=members)
    dwell = fit_dwell_mixtures(days, chains, members=members, seed=seed)
    meta = {"source": "synthetic survey (not real survey data)", "person_days": n, "seed": seed}
    return CalibrationBundle(chains=chains, dwell=dwell, meta=meta)


if __name__ == "__main__":  # regenerate the shipped default bundle
    import sys

    make_default_bundle().save(sys.argv[1] if len(sys.argv) > 1 else "default_bundle.json")
