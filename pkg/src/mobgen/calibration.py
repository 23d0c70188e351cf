"""Fitting the calibration bundle from a trip-diary survey."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import ks_2samp

from . import PURPOSES
from .bundle import CalibrationBundle
from .destination import (DEFAULT_ATTRACTION, DEFAULT_DETERRENCE, FEATURES, FORM_NPARAMS, FORMS, Deterrence,
                          choice_probabilities, deterrence_minimum_km, form_design)
from .errors import EmptySurveyError, FitError, SchemaError
from .geo import haversine
from .population import UNDEFINED, SocioFeatures
from .routing import BIN_WIDTH_M
from .schedule import (ACTIVITY_TYPES, GLOBAL_KEY, MIN_SAMPLES, WEEKDAYS, ChainDistribution, ChainTable,
                       DwellMixture, DwellTable, recalibrate_chain_lengths)

log = logging.getLogger(__name__)

SURVEY_COLUMNS = ("person_id", "age", "hom_group", "mob_group", "weekday", "trip_index", "purpose",
                  "origin_cell", "dest_cell", "start_min", "end_min")
CELLS_SCHEMA = "mobgen.cells/1"
FEATURE_GAIN_EPS = 1e-4
DETERRENCE_INIT = (-0.1, -1.0, 0.0)
KS_SIM_TRIPS = 100_000
EM_MAX_ITER = 200
EM_REG = 1e-6


# --------------------------------------------------------------------------
# Survey records


@dataclass
class SurveyTrip:
    """One survey row.

    Row ``trip_index == 0`` anchors the day: ``purpose`` is the first activity
    and ``dest_cell`` its location. Rows 1..k are trips; ``purpose`` is the
    activity at the destination, times are minutes after midnight.
    """

    person_id: str
    features: SocioFeatures
    weekday: str
    trip_index: int
    purpose: str
    origin_cell: int | None
    dest_cell: int | None
    start_min: float
    end_min: float


def _opt_int(v):
    v = (v or "").strip()
    return None if v == "" else int(v)


def read_survey(path) -> list[SurveyTrip]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in SURVEY_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: survey is missing column(s): {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                wd = row["weekday"] or UNDEFINED
                if wd != UNDEFINED and wd not in WEEKDAYS:
                    raise ValueError(f"unknown weekday {wd!r}")
                if row["purpose"] not in ACTIVITY_TYPES:
                    raise ValueError(f"unknown purpose {row['purpose']!r}")
                rows.append(SurveyTrip(
                    person_id=row["person_id"],
                    features=SocioFeatures(row["age"] or UNDEFINED, row["hom_group"] or UNDEFINED,
                                           row["mob_group"] or UNDEFINED),
                    weekday=wd,
                    trip_index=int(row["trip_index"]),
                    purpose=row["purpose"],
                    origin_cell=_opt_int(row["origin_cell"]),
                    dest_cell=_opt_int(row["dest_cell"]),
                    start_min=float(row["start_min"] or 0),
                    end_min=float(row["end_min"] or 0),
                ))
            except (ValueError, SchemaError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise EmptySurveyError(f"{path}: empty survey")
    return rows


def write_survey(trips, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVEY_COLUMNS)
        for t in trips:
            w.writerow([t.person_id, t.features.age, t.features.hom_group, t.features.mob_group, t.weekday,
                        t.trip_index, t.purpose, "" if t.origin_cell is None else t.origin_cell,
                        "" if t.dest_cell is None else t.dest_cell, f"{t.start_min:.3f}", f"{t.end_min:.3f}"])


@dataclass
class PersonDay:
    person_id: str
    features: SocioFeatures
    weekday: str
    chain: tuple
    dwell_hours: np.ndarray  # one per non-final activity
    locations: list  # cell per activity (None if unknown)
    trips: list = field(default_factory=list)

    @property
    def key(self) -> tuple:
        return self.features.as_tuple() + (self.weekday,)


def person_days(trips) -> list[PersonDay]:
    """Group survey rows into person-days (ordered by first appearance)."""
    groups: dict[str, list[SurveyTrip]] = {}
    for t in trips:
        groups.setdefault(t.person_id, []).append(t)
    out = []
    for pid, rows in groups.items():
        rows.sort(key=lambda r: r.trip_index)
        if rows[0].trip_index == 0:
            anchor, moves = rows[0], rows[1:]
        else:
            anchor = None
            moves = rows
        first = anchor.purpose if anchor else "home"
        first_loc = anchor.dest_cell if anchor else moves[0].origin_cell
        chain = (first,) + tuple(r.purpose for r in moves)
        dwell, t_prev = [], 0.0
        for r in moves:
            dwell.append(max(r.start_min - t_prev, 0.0) / 60.0)
            t_prev = r.end_min
        head = anchor or moves[0]
        out.append(PersonDay(pid, head.features, head.weekday, chain, np.asarray(dwell),
                             [first_loc] + [r.dest_cell for r in moves], list(moves)))
    return out


# --------------------------------------------------------------------------
# Cell feature table


@dataclass
class CellTable:
    ids: list
    lon: np.ndarray
    lat: np.ndarray
    features: np.ndarray  # (cells, 12), sums over member buildings
    n_buildings: np.ndarray
    population: np.ndarray

    def __post_init__(self):
        self.lon = np.asarray(self.lon, dtype=float)
        self.lat = np.asarray(self.lat, dtype=float)
        self.features = np.asarray(self.features, dtype=float).reshape(len(self.ids), len(FEATURES))
        self.n_buildings = np.asarray(self.n_buildings, dtype=float)
        self.population = np.asarray(self.population, dtype=float)
        if np.any(self.features < 0) or np.any(self.n_buildings < 0):
            raise SchemaError("cell features must be non-negative")
        self._index = {cid: i for i, cid in enumerate(self.ids)}
        self._dist = None

    def __len__(self):
        return len(self.ids)

    def index(self, cell_ids) -> np.ndarray:
        try:
            return np.array([self._index[c] for c in cell_ids], dtype=np.int64)
        except KeyError as exc:
            raise SchemaError(f"survey references unknown cell {exc.args[0]!r}") from None

    def attraction(self, theta) -> np.ndarray:
        return self.n_buildings + self.features @ np.asarray(theta, dtype=float)

    def distances(self) -> np.ndarray:
        """Beeline distance matrix between cell centroids in meters."""
        if self._dist is None:
            self._dist = haversine(self.lon[:, None], self.lat[:, None], self.lon[None, :], self.lat[None, :])
        return self._dist

    @classmethod
    def from_grid(cls, buildings, cells) -> "CellTable":
        from .destination import feature_matrix

        X = feature_matrix(buildings)
        pop = np.array([b.population for b in buildings])
        feats = np.vstack([X[c.members].sum(axis=0) for c in cells])
        return cls([c.id for c in cells], [c.lon for c in cells], [c.lat for c in cells], feats,
                   [len(c.members) for c in cells], [pop[c.members].sum() for c in cells])

    def to_json(self) -> dict:
        return {"schema": CELLS_SCHEMA, "cells": [
            {"id": cid, "centroid": [float(self.lon[i]), float(self.lat[i])],
             "n_buildings": float(self.n_buildings[i]), "population": float(self.population[i]),
             "features": {f: float(self.features[i, k]) for k, f in enumerate(FEATURES)}}
            for i, cid in enumerate(self.ids)]}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "CellTable":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("schema") != CELLS_SCHEMA:
            raise SchemaError(f"{path}: unexpected cell table schema {doc.get('schema')!r}")
        cells = doc["cells"]
        return cls([c["id"] for c in cells], [c["centroid"][0] for c in cells],
                   [c["centroid"][1] for c in cells],
                   [[c["features"].get(f, 0.0) for f in FEATURES] for c in cells],
                   [c.get("n_buildings", 1.0) for c in cells], [c.get("population", 0.0) for c in cells])


# --------------------------------------------------------------------------
# Attraction


@dataclass
class AttractionFit:
    theta: np.ndarray
    mean_loglik: float
    n_trips: int
    active: tuple


def _attraction_problem(dest_idx, table: CellTable):
    counts = np.bincount(np.asarray(dest_idx, dtype=np.int64), minlength=len(table)).astype(float)
    n = counts.sum()
    if n == 0:
        raise FitError("no destinations to fit")
    nb = table.n_buildings
    X = table.features
    # per-building average of each feature; rescales θ to comparable magnitudes
    scale = X.sum(axis=0) / max(nb.sum(), 1.0)
    return counts, n, nb, X, scale


def attraction_loglik(theta, dest_idx, table: CellTable) -> float:
    """Mean log-probability of the observed destinations under P ∝ A."""
    a = table.attraction(theta)
    counts = np.bincount(np.asarray(dest_idx, dtype=np.int64), minlength=len(table))
    return float((counts * np.log(a / a.sum())).sum() / counts.sum())


def fit_attraction(dest_idx, table: CellTable, active=None, maxiter: int = 2000) -> AttractionFit:
    """Box-constrained MLE (θ ≥ 0) of the destination-only logit P(j) ∝ A_j."""
    counts, n, nb, X, scale = _attraction_problem(dest_idx, table)
    k = X.shape[1]
    usable = scale > 0
    if active is not None:
        mask = np.zeros(k, dtype=bool)
        mask[list(active)] = True
        usable &= mask
    act = tuple(int(i) for i in np.nonzero(usable)[0])
    if not act:
        theta = np.zeros(k)
        return AttractionFit(theta, attraction_loglik(theta, dest_idx, table), int(n), ())
    Z = X[:, act] / scale[list(act)]
    zsum = Z.sum(axis=0)
    w = counts / n

    def f(phi):
        a = nb + Z @ phi
        tot = a.sum()
        val = -(w @ np.log(a)) + math.log(tot)
        grad = -(Z.T @ (w / a)) + zsum / tot
        return val, grad

    res = optimize.minimize(f, np.zeros(len(act)), jac=True, method="L-BFGS-B",
                            bounds=[(0.0, None)] * len(act),
                            options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-10})
    if res.status == 1:
        raise FitError(f"attraction fit did not converge after {maxiter} iterations "
                       f"(features {[FEATURES[i] for i in act]}, |grad|={np.abs(res.jac).max():.3g})")
    theta = np.zeros(k)
    theta[list(act)] = np.maximum(res.x, 0.0) / scale[list(act)]
    return AttractionFit(theta, attraction_loglik(theta, dest_idx, table), int(n), act)


@dataclass
class FeatureSelection:
    active: tuple
    fit: AttractionFit
    ranking: list  # (feature index, loss in mean log-likelihood when dropped)
    path: list  # (feature set, mean log-likelihood)


def rank_and_select_features(dest_idx, table: CellTable, eps: float = FEATURE_GAIN_EPS) -> FeatureSelection:
    """Leave-one-out ranking followed by forward addition while the mean
    log-likelihood per trip improves by more than ``eps``."""
    full = fit_attraction(dest_idx, table)
    cands = full.active
    ranking = []
    for k in cands:
        reduced = fit_attraction(dest_idx, table, active=[c for c in cands if c != k])
        ranking.append((k, full.mean_loglik - reduced.mean_loglik))
    ranking.sort(key=lambda t: (-t[1], t[0]))
    best = fit_attraction(dest_idx, table, active=[])
    path = [((), best.mean_loglik)]
    for m in range(1, len(ranking) + 1):
        feats = tuple(sorted(k for k, _ in ranking[:m]))
        trial = fit_attraction(dest_idx, table, active=feats)
        path.append((feats, trial.mean_loglik))
        if trial.mean_loglik - best.mean_loglik > eps:
            best = trial
        else:
            break
    active = tuple(i for i in best.active if best.theta[i] > 0) if best.active else ()
    return FeatureSelection(active, best, ranking, path)


# --------------------------------------------------------------------------
# Deterrence


class BinnedDeterrenceData:
    """Sufficient statistics of the distance-binned destination likelihood.

    For every observed origin o and 50 m bin b, ``S[o, b]`` is the summed
    attraction of cells whose distance from o falls into b. Only the observed
    trip distances and these sums enter the likelihood.
    """

    def __init__(self, origins, dests, dist_m, attraction, bin_width: float = BIN_WIDTH_M):
        origins = np.asarray(origins, dtype=np.int64)
        dests = np.asarray(dests, dtype=np.int64)
        if len(origins) == 0:
            raise FitError("no trips with known origin and destination")
        self.n = len(origins)
        self.bin_width = bin_width
        self.trip_km = np.asarray(dist_m)[origins, dests] / 1000.0
        uniq, counts = np.unique(origins, return_counts=True)
        self.origin_counts = counts.astype(float)
        reps, sums, starts = [], [], []
        pos = 0
        for o in uniq:
            bins = np.floor(np.asarray(dist_m[o], dtype=float) / bin_width).astype(np.int64)
            s = np.bincount(bins, weights=attraction)
            nz = np.nonzero(s)[0]
            starts.append(pos)
            pos += len(nz)
            reps.append((nz + 0.5) * bin_width / 1000.0)
            sums.append(s[nz])
        self.bin_km = np.concatenate(reps)
        self.log_sum = np.log(np.concatenate(sums))
        self.starts = np.asarray(starts, dtype=np.int64)
        self.seg = np.repeat(np.arange(len(uniq)), np.diff(np.append(self.starts, pos)))
        self._designs = {}

    def _design(self, form):
        if form not in self._designs:
            self._designs[form] = (form_design(self.trip_km, form).sum(axis=0), form_design(self.bin_km, form))
        return self._designs[form]

    def loglik(self, params, form: str, with_grad: bool = False):
        """Summed reduced log-likelihood (constant attraction terms dropped)."""
        params = np.asarray(params, dtype=float)
        trip_sum, phi = self._design(form)
        v = phi @ params + self.log_sum
        vmax = np.maximum.reduceat(v, self.starts)
        e = np.exp(v - vmax[self.seg])
        z = np.add.reduceat(e, self.starts)
        lse = vmax + np.log(z)
        ll = float(trip_sum @ params - self.origin_counts @ lse)
        if not with_grad:
            return ll
        wts = e / z[self.seg] * self.origin_counts[self.seg]
        grad = trip_sum - wts @ phi
        return ll, grad


def direct_loglik(params, form: str, origins, dests, dist_m, attraction) -> float:
    """Exact (unbinned) summed log-likelihood of the observed destinations."""
    det = Deterrence(form, tuple(params))
    ll = 0.0
    attraction = np.asarray(attraction, dtype=float)
    by_origin = defaultdict(list)
    for o, t in zip(origins, dests):
        by_origin[int(o)].append(int(t))
    for o, ts in by_origin.items():
        p = choice_probabilities(attraction, dist_m[o], det)
        ll += float(np.log(p[ts]).sum())
    return ll


@dataclass
class DeterrenceFit:
    deterrence: Deterrence
    loglik: float
    converged: bool


def fit_deterrence(data: BinnedDeterrenceData, form: str, maxiter: int = 1000) -> DeterrenceFit:
    """Maximise the binned likelihood for one linearised form (attraction fixed)."""
    k = FORM_NPARAMS[form]
    x0 = np.array(DETERRENCE_INIT[:k])

    def f(x):
        ll, g = data.loglik(x, form, with_grad=True)
        return -ll / data.n, -g / data.n

    res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-9})
    if res.status == 1 or not np.all(np.isfinite(res.x)):
        raise FitError(f"deterrence fit ({form}) did not converge: {res.message}")
    det = Deterrence(form, tuple(res.x))
    cutoff = deterrence_minimum_km(det)
    if cutoff is not None:
        det = Deterrence(form, det.params, cutoff_km=round(cutoff, 3))
    return DeterrenceFit(det, -res.fun * data.n, bool(res.success))


def simulate_trip_distances(det, origins, dist_m, attraction, n: int, seed: int = 0) -> np.ndarray:
    """Trip distances (m) drawn from the logit, origins resampled from ``origins``.

    The same seed gives the same origin draws and uniforms for any ``det``.
    """
    rng = np.random.default_rng(seed)
    origins = np.asarray(origins, dtype=np.int64)
    o = origins[rng.integers(0, len(origins), size=n)]
    u = rng.random(n)
    out = np.empty(n)
    for src in np.unique(o):
        sel = o == src
        cdf = np.cumsum(choice_probabilities(attraction, dist_m[src], det))
        j = np.minimum(np.searchsorted(cdf, u[sel] * cdf[-1], side="right"), len(cdf) - 1)
        out[sel] = dist_m[src][j]
    return out


def ks_statistic(a, b) -> float:
    return float(ks_2samp(a, b).statistic)


def ks_tie_band(n: int, m: int) -> float:
    """95% critical value of the two-sample KS statistic."""
    return 1.358 * math.sqrt((n + m) / (n * m))


@dataclass
class FormSelection:
    form: str
    deterrence: Deterrence
    ks: dict


def select_deterrence_form(fits: dict, origins, dests, dist_m, attraction,
                           n_sim: int = KS_SIM_TRIPS, seed: int = 0) -> FormSelection:
    """Pick the form whose simulated trip distances best match the survey (KS).

    Forms within the KS 95% band of the best one count as tied; ties go to
    the form with fewer parameters.
    """
    observed = np.asarray(dist_m)[np.asarray(origins), np.asarray(dests)]
    ks = {}
    for form, det in fits.items():
        det = det.deterrence if isinstance(det, DeterrenceFit) else det
        sim = simulate_trip_distances(det, origins, dist_m, attraction, n_sim, seed)
        ks[form] = ks_statistic(sim, observed)
    best = min(ks.values())
    band = ks_tie_band(len(observed), n_sim)
    tied = [f for f in ks if ks[f] <= best + band]
    form = min(tied, key=lambda f: (FORM_NPARAMS[f], ks[f], FORMS.index(f)))
    det = fits[form].deterrence if isinstance(fits[form], DeterrenceFit) else fits[form]
    return FormSelection(form, det, ks)


# --------------------------------------------------------------------------
# Activity chains and dwell times


def _subset_keys(pd: PersonDay):
    """All (age, group, mobility, weekday) filters this person-day passes."""
    own = pd.key
    for mask in itertools.product((False, True), repeat=4):
        yield tuple(UNDEFINED if relax else v for v, relax in zip(own, mask))


def key_members(days) -> dict:
    members = defaultdict(list)
    for i, pd in enumerate(days):
        for k in set(_subset_keys(pd)):
            members[k].append(i)
    return members


def build_chain_tables(days, min_samples: int = MIN_SAMPLES, members=None) -> ChainTable:
    """Empirical chain distributions per feature/weekday filter.

    Chains seen fewer than ``min_samples`` times are dropped and the remaining
    probabilities rescaled to the pre-drop chain-length shares.
    """
    if not days:
        raise EmptySurveyError("empty survey")
    members = key_members(days) if members is None else members
    table = ChainTable(min_samples=min_samples)
    notes = []
    for key in sorted(members):
        idx = members[key]
        n = len(idx)
        if n < min_samples:
            continue
        counts = Counter(days[i].chain for i in idx)
        lengths = Counter()
        for c, k in counts.items():
            lengths[len(c)] += k
        marg = {L: k / n for L, k in sorted(lengths.items())}
        kept = sorted((c for c, k in counts.items() if k >= min_samples), key=lambda c: (-counts[c], c))
        if not kept:
            continue
        tot = sum(counts[c] for c in kept)
        dist = ChainDistribution(key, kept, [counts[c] / tot for c in kept], n)
        table.dists[key] = recalibrate_chain_lengths(dist, marg, notes)
        table.length_marginals[key] = marg
    if notes:
        log.warning("%d chain tables lost every chain of some length; their mass was reallocated "
                    "(first: %s)", len(notes), notes[0])
        for msg in notes:
            log.debug(msg)
    if GLOBAL_KEY not in table.dists:
        raise EmptySurveyError(f"survey has no chain observed at least {min_samples} times overall")
    return table


@dataclass
class MixtureFit:
    mixture: DwellMixture
    bics: list


def fit_gmm_bic(X, max_components: int = 8, seed: int = 0) -> MixtureFit:
    """Grow the component count until BIC stops decreasing."""
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.mixture import GaussianMixture

    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]

    def fit(k):
        for reg in (EM_REG, 1e-4, 1e-2):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    gm = GaussianMixture(n_components=k, covariance_type="full", reg_covar=reg,
                                         max_iter=EM_MAX_ITER, n_init=2, random_state=seed).fit(X)
                return gm, gm.bic(X)
            except ValueError as exc:
                last = exc
        raise FitError(f"EM failed for {k} components on {len(X)} samples: {last}")

    gm, bic = fit(1)
    bics = [bic]
    k = 1
    while k < min(max_components, len(X)):
        cand, cbic = fit(k + 1)
        bics.append(cbic)
        if cbic >= bic:
            break
        gm, bic, k = cand, cbic, k + 1
    cov = 0.5 * (gm.covariances_ + np.transpose(gm.covariances_, (0, 2, 1)))
    return MixtureFit(DwellMixture(gm.weights_ / gm.weights_.sum(), gm.means_, cov), bics)


def fit_dwell_mixtures(days, table: ChainTable, members=None, max_components: int = 8,
                       seed: int = 0) -> DwellTable:
    """One mixture per (filter key, chain) for every chain kept in ``table``."""
    members = key_members(days) if members is None else members
    out = DwellTable()
    cache = {}
    for key, dist in sorted(table.dists.items()):
        by_chain = defaultdict(list)
        for i in members[key]:
            by_chain[days[i].chain].append(i)
        for chain in dist.chains:
            if len(chain) <= 1:
                continue
            idx = tuple(by_chain[chain])
            if idx not in cache:
                X = np.vstack([days[i].dwell_hours for i in idx])
                cache[idx] = fit_gmm_bic(X, max_components, seed).mixture
            out.mixtures[(key, chain)] = cache[idx]
    return out


# --------------------------------------------------------------------------
# Whole pipeline


@dataclass
class CalibrationReport:
    attraction: dict = field(default_factory=dict)  # purpose -> FeatureSelection | None
    deterrence: dict = field(default_factory=dict)  # purpose -> FormSelection | None
    fits: dict = field(default_factory=dict)  # purpose -> {form: DeterrenceFit}


def calibrate_destination_choice(trips, table: CellTable, dist_m=None, purposes=PURPOSES,
                                 select_features: bool = True, forms=FORMS, min_trips: int = 30,
                                 n_sim: int = KS_SIM_TRIPS, seed: int = 0):
    """Attraction then deterrence per purpose. Returns (attraction, deterrence, report).

    Purposes with fewer than ``min_trips`` usable records keep the defaults.
    """
    dist_m = table.distances() if dist_m is None else np.asarray(dist_m)
    attraction = {p: DEFAULT_ATTRACTION[p].copy() for p in PURPOSES}
    deterrence = dict(DEFAULT_DETERRENCE)
    report = CalibrationReport()
    for p in purposes:
        rows = [t for t in trips if t.purpose == p and t.trip_index > 0 and t.dest_cell is not None]
        if len(rows) < min_trips:
            log.warning("purpose %s: only %d trips; keeping default parameters", p, len(rows))
            continue
        dest = table.index([t.dest_cell for t in rows])
        if select_features:
            sel = rank_and_select_features(dest, table)
            attraction[p] = sel.fit.theta
            report.attraction[p] = sel
        else:
            attraction[p] = fit_attraction(dest, table).theta
        log.info("purpose %s: attraction %s", p,
                 {FEATURES[i]: round(float(v), 4) for i, v in enumerate(attraction[p]) if v > 0})
        if p == "home":
            deterrence[p] = None
            continue
        od = [t for t in rows if t.origin_cell is not None]
        if len(od) < min_trips:
            log.warning("purpose %s: only %d trips with origin; keeping default deterrence", p, len(od))
            continue
        o = table.index([t.origin_cell for t in od])
        d = table.index([t.dest_cell for t in od])
        a = table.attraction(attraction[p])
        data = BinnedDeterrenceData(o, d, dist_m, a)
        fits = {}
        for form in forms:
            try:
                fits[form] = fit_deterrence(data, form)
            except FitError as exc:
                log.warning("purpose %s: %s", p, exc)
        if not fits:
            raise FitError(f"no deterrence form could be fitted for purpose {p}")
        choice = select_deterrence_form(fits, o, d, dist_m, a, n_sim=n_sim, seed=seed)
        deterrence[p] = choice.deterrence
        report.deterrence[p] = choice
        report.fits[p] = fits
        log.info("purpose %s: deterrence %s %s (KS %s)", p, choice.form, choice.deterrence.params,
                 {f: round(v, 4) for f, v in choice.ks.items()})
    return attraction, deterrence, report


def calibrate(trips, table: CellTable, dist_m=None, seed: int = 0, select_features: bool = True,
              n_sim: int = KS_SIM_TRIPS, max_components: int = 8):
    """Fit a complete bundle from survey rows. Returns (bundle, report)."""
    if not trips:
        raise EmptySurveyError("empty survey")
    days = person_days(trips)
    members = key_members(days)
    chains = build_chain_tables(days, members=members)
    dwell = fit_dwell_mixtures(days, chains, members=members, max_components=max_components, seed=seed)
    attraction, deterrence, report = calibrate_destination_choice(
        trips, table, dist_m, select_features=select_features, n_sim=n_sim, seed=seed)
    meta = {"source": "calibrated", "person_days": len(days), "trips": sum(len(d.trips) for d in days)}
    return CalibrationBundle(attraction, deterrence, chains, dwell, meta), report
