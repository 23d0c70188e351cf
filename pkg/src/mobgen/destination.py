"""Gravity-style destination choice: attraction, deterrence and the logit step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import PURPOSES
from .errors import DegenerateChoiceError

FEATURES = (
    "a_residential", "a_industrial", "a_commercial", "a_other",
    "u_offices", "u_shops", "u_schools", "u_universities",
    "u_residential", "u_industrial", "u_commercial", "u_other",
)
_LANDUSE_SLOT = {"residential": 0, "industrial": 1, "commercial": 2, "none": 3}

FORMS = ("E", "PE", "L", "LE")
FORM_NPARAMS = {"E": 1, "PE": 2, "L": 2, "LE": 3}
FORM_ALIASES = {"EP": "PE"}

D_FLOOR_KM = 0.05


def _theta(**nonzero) -> np.ndarray:
    th = np.zeros(len(FEATURES))
    for k, v in nonzero.items():
        th[int(k[1:])] = v
    return th


# Default attraction coefficients per trip purpose (index = feature slot).
DEFAULT_ATTRACTION = {
    "home": _theta(t0=0.0327, t5=314.09, t6=1679.18),
    "work": _theta(t4=727.14, t5=280.69, t6=611.39),
    "school": _theta(t4=339.04, t5=132.36, t6=2115.64, t7=3061.74),
    "shopping": _theta(t5=348.44),
    "other": _theta(t0=0.0370, t4=2789.23, t5=2179.04, t6=1966.55),
}


@dataclass(frozen=True)
class Deterrence:
    """ln f(d) for one purpose, d in km.

    E:  a·d
    PE: a·d + b·ln d
    L:  a·ln²d + b·ln d
    LE: a·ln²d + b·ln d + c·d
    """

    form: str
    params: tuple
    cutoff_km: float | None = None

    def __post_init__(self):
        form = FORM_ALIASES.get(self.form, self.form)
        if form not in FORMS:
            raise ValueError(f"unknown deterrence form {self.form!r}")
        object.__setattr__(self, "form", form)
        params = tuple(float(p) for p in self.params)
        if len(params) != FORM_NPARAMS[form]:
            raise ValueError(f"form {form} takes {FORM_NPARAMS[form]} parameters, got {len(params)}")
        object.__setattr__(self, "params", params)

    @property
    def n_params(self) -> int:
        return FORM_NPARAMS[self.form]

    def log_f(self, d_km):
        return log_deterrence(d_km, self)

    def to_dict(self) -> dict:
        return {"form": self.form, "params": list(self.params), "cutoff_km": self.cutoff_km}

    @classmethod
    def from_dict(cls, rec: dict) -> "Deterrence":
        return cls(rec["form"], tuple(rec["params"]), rec.get("cutoff_km"))


DEFAULT_DETERRENCE = {
    "home": None,  # f == 1
    "work": Deterrence("PE", (-0.035, -0.919)),
    "school": Deterrence("LE", (-0.235, -1.176, 0.005), cutoff_km=827.0),
    "shopping": Deterrence("L", (-0.215, -1.414)),
    "other": Deterrence("L", (-0.180, -1.067)),
}


def form_design(d_km, form: str) -> np.ndarray:
    """Regressors of the linearised form, shape (..., n_params)."""
    d = np.maximum(np.asarray(d_km, dtype=float), D_FLOOR_KM)
    ln = np.log(d)
    form = FORM_ALIASES.get(form, form)
    if form == "E":
        cols = (d,)
    elif form == "PE":
        cols = (d, ln)
    elif form == "L":
        cols = (ln * ln, ln)
    elif form == "LE":
        cols = (ln * ln, ln, d)
    else:
        raise ValueError(f"unknown deterrence form {form!r}")
    return np.stack(cols, axis=-1)


def log_deterrence(d_km, det: Deterrence | None):
    """ln f(d) with d floored at 50 m; ``-inf`` beyond the cutoff.

    ``det=None`` means no deterrence (f ≡ 1).
    """
    scalar = np.ndim(d_km) == 0
    d = np.asarray(d_km, dtype=float)
    if det is None:
        out = np.zeros_like(d)
    else:
        out = form_design(d, det.form) @ np.asarray(det.params)
        if det.cutoff_km is not None:
            out = np.where(d > det.cutoff_km, -np.inf, out)
    return float(out) if scalar else out


def deterrence_minimum_km(det: Deterrence, d_max_km: float = 5000.0) -> float | None:
    """First local minimum of ln f beyond 50 m, or None if f never turns upward."""
    d = np.geomspace(D_FLOOR_KM, d_max_km, 200_001)
    s = np.sign(np.diff(log_deterrence(d, Deterrence(det.form, det.params))))
    turn = np.nonzero((s[:-1] < 0) & (s[1:] > 0))[0]
    return float(d[turn[0] + 1]) if len(turn) else None


# --------------------------------------------------------------------------
# Attraction


def building_features(b) -> np.ndarray:
    x = np.zeros(len(FEATURES))
    slot = _LANDUSE_SLOT.get(b.landuse, 3)
    x[slot] = b.area
    x[4] = b.n_offices
    x[5] = b.n_shops
    x[6] = b.n_schools
    x[7] = b.n_universities
    x[8 + slot] = 1.0
    return x


def feature_matrix(buildings) -> np.ndarray:
    if not buildings:
        return np.zeros((0, len(FEATURES)))
    return np.vstack([building_features(b) for b in buildings])


def attraction(b, purpose: str, coeffs=None) -> float:
    """Linear attraction weight 1 + θ·x of one building (always ≥ 1)."""
    coeffs = DEFAULT_ATTRACTION if coeffs is None else coeffs
    return 1.0 + float(np.dot(np.asarray(coeffs[purpose]), building_features(b)))


def attraction_table(features: np.ndarray, coeffs=None, purposes=PURPOSES) -> np.ndarray:
    """Attraction of every row of ``features`` for every purpose, shape (n, P)."""
    coeffs = DEFAULT_ATTRACTION if coeffs is None else coeffs
    theta = np.column_stack([np.asarray(coeffs[p], dtype=float) for p in purposes])
    return 1.0 + features @ theta


# --------------------------------------------------------------------------
# Choice probabilities


def choice_probabilities(attr, dist_m, det: Deterrence | None) -> np.ndarray:
    """P(j) ∝ A_j · f(d_j) evaluated as a logit over V = ln A + ln f."""
    attr = np.asarray(attr, dtype=float)
    with np.errstate(divide="ignore"):
        v = np.log(attr) + log_deterrence(np.asarray(dist_m, dtype=float) / 1000.0, det)
    vmax = np.max(v) if v.size else -np.inf
    if not np.isfinite(vmax):
        raise DegenerateChoiceError(
            f"all {v.size} alternatives have zero weight "
            f"(max distance {np.max(dist_m) / 1000 if v.size else float('nan'):.1f} km, "
            f"cutoff {None if det is None else det.cutoff_km})")
    w = np.exp(v - vmax)
    return w / w.sum()


def destination_probabilities(origin: int, purpose: str, cell_attraction, dmat, deterrence=None) -> np.ndarray:
    """Cell-level destination distribution from ``origin`` for ``purpose``.

    ``cell_attraction`` maps purpose -> per-cell aggregated attraction (or is
    an array of shape (cells, purposes) ordered like PURPOSES).
    """
    deterrence = DEFAULT_DETERRENCE if deterrence is None else deterrence
    if isinstance(cell_attraction, dict):
        attr = cell_attraction[purpose]
    else:
        attr = np.asarray(cell_attraction)[:, PURPOSES.index(purpose)]
    return choice_probabilities(attr, dmat.row(origin), deterrence.get(purpose))


def sample_index(cdf: np.ndarray, rng) -> int:
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


@dataclass
class DestinationChooser:
    """Two-stage destination sampler over a grid.

    Stage one draws a cell with the logit over aggregated attraction and
    centroid distance; stage two draws a member building by attraction only.
    Cumulative distributions are cached per (origin cell, purpose).
    """

    building_attraction: np.ndarray  # (buildings, purposes)
    cell_members: list  # list of int arrays of building indices
    building_cell: np.ndarray  # building index -> cell index
    dmat: object
    deterrence: dict = field(default_factory=lambda: dict(DEFAULT_DETERRENCE))

    def __post_init__(self):
        self.cell_attraction = np.vstack([
            self.building_attraction[m].sum(axis=0) for m in self.cell_members
        ])
        self._cell_cdf: dict = {}
        self._member_cdf: dict = {}
        self._global_cdf: dict = {}

    @classmethod
    def from_grid(cls, buildings, cells, dmat, coeffs=None, deterrence=None):
        attr = attraction_table(feature_matrix(buildings), coeffs)
        owner = np.empty(len(buildings), dtype=np.int64)
        members = []
        for i, c in enumerate(cells):
            m = np.asarray(c.members, dtype=np.int64)
            owner[m] = i
            members.append(m)
        det = dict(DEFAULT_DETERRENCE if deterrence is None else deterrence)
        return cls(attr, members, owner, dmat, det)

    def cell_probabilities(self, origin_cell: int, purpose: str) -> np.ndarray:
        p = PURPOSES.index(purpose)
        return choice_probabilities(self.cell_attraction[:, p], self.dmat.row(origin_cell),
                                    self.deterrence.get(purpose))

    def _cdf_cell(self, origin_cell, purpose):
        key = (origin_cell, purpose)
        cdf = self._cell_cdf.get(key)
        if cdf is None:
            cdf = np.cumsum(self.cell_probabilities(origin_cell, purpose))
            self._cell_cdf[key] = cdf
        return cdf

    def _cdf_member(self, cell, purpose):
        key = (cell, purpose)
        cdf = self._member_cdf.get(key)
        if cdf is None:
            cdf = np.cumsum(self.building_attraction[self.cell_members[cell], PURPOSES.index(purpose)])
            self._member_cdf[key] = cdf
        return cdf

    def choose(self, origin_building: int, purpose: str, rng) -> int:
        cell = sample_index(self._cdf_cell(int(self.building_cell[origin_building]), purpose), rng)
        return self.choose_in_cell(cell, purpose, rng)

    def choose_in_cell(self, cell: int, purpose: str, rng) -> int:
        members = self.cell_members[cell]
        if len(members) == 1:
            return int(members[0])
        return int(members[sample_index(self._cdf_member(cell, purpose), rng)])

    def choose_without_distance(self, purpose: str, rng) -> int:
        """Draw a building with P ∝ attraction alone (deterrence ≡ 1)."""
        cdf = self._global_cdf.get(purpose)
        if cdf is None:
            cdf = np.cumsum(self.building_attraction[:, PURPOSES.index(purpose)])
            self._global_cdf[purpose] = cdf
        return sample_index(cdf, rng)

    def building_probabilities(self, origin_building: int, purpose: str) -> np.ndarray:
        """Exact marginal over buildings implied by the two-stage scheme."""
        p = PURPOSES.index(purpose)
        pc = self.cell_probabilities(int(self.building_cell[origin_building]), purpose)
        out = np.zeros(len(self.building_attraction))
        for c, m in enumerate(self.cell_members):
            a = self.building_attraction[m, p]
            out[m] = pc[c] * a / a.sum()
        return out


def choose_destination(origin_building: int, purpose: str, chooser: DestinationChooser, rng) -> int:
    return chooser.choose(origin_building, purpose, rng)
