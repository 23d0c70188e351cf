"""Daily activity chains and dwell times."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .destination import sample_index
from .errors import BundleError
from .population import UNDEFINED, Agent, agent_rng, assign_fixed_location

log = logging.getLogger(__name__)

ACTIVITY_TYPES = ("home", "work", "school", "shopping", "other")
WEEKDAYS = ("mo", "tu", "we", "th", "fr", "sa", "su")
MIN_SAMPLES = 30
DAY_MINUTES = 1440.0
MAX_REDRAWS = 100

GLOBAL_KEY = (UNDEFINED, UNDEFINED, UNDEFINED, UNDEFINED)


def next_weekday(weekday: str) -> str:
    if weekday == UNDEFINED:
        return UNDEFINED
    return WEEKDAYS[(WEEKDAYS.index(weekday) + 1) % 7]


def cascade(key: tuple):
    """Keys visited when relaxing (age, hom_group, mob_group, weekday).

    Order of relaxation: age, mobility group, homogenous group, weekday.
    """
    age, hom, mob, wd = key
    seen = []
    for k in ((age, hom, mob, wd),
              (UNDEFINED, hom, mob, wd),
              (UNDEFINED, hom, UNDEFINED, wd),
              (UNDEFINED, UNDEFINED, UNDEFINED, wd),
              GLOBAL_KEY):
        if k not in seen:
            seen.append(k)
            yield k


@dataclass
class ChainDistribution:
    key: tuple
    chains: list  # list of tuples of activity names
    probs: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.chains = [tuple(c) for c in self.chains]
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.chains) != len(self.probs):
            raise ValueError("chains and probabilities differ in length")

    def as_dict(self) -> dict:
        return {c: float(p) for c, p in zip(self.chains, self.probs)}

    def length_histogram(self) -> dict:
        out = defaultdict(float)
        for c, p in zip(self.chains, self.probs):
            out[len(c)] += p
        return dict(out)


def recalibrate_chain_lengths(dist: ChainDistribution, length_marginals: dict,
                              notes: list | None = None) -> ChainDistribution:
    """Rescale chain probabilities so each length group carries its marginal.

    Ratios within a length group are preserved. Marginal mass of lengths with
    no surviving chain is spread proportionally over the other groups; that
    event is logged, or appended to ``notes`` when a list is given.
    """
    total = math.fsum(length_marginals.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"length marginals sum to {total}, not 1")
    lengths = np.array([len(c) for c in dist.chains])
    present = set(lengths.tolist())
    missing = {L: p for L, p in length_marginals.items() if L not in present and p > 0}
    kept = {L: length_marginals.get(L, 0.0) for L in present}
    kept_mass = math.fsum(kept.values())
    if missing:
        msg = (f"chain lengths {sorted(missing)} have no surviving chain for key {dist.key}; "
               f"reallocating {math.fsum(missing.values()):.4f} of mass")
        if notes is None:
            log.warning(msg)
        else:
            notes.append(msg)
    if kept_mass <= 0:
        log.warning("no length marginal mass left for key %s; keeping empirical shares", dist.key)
        return dist
    new = np.zeros_like(dist.probs)
    for L in present:
        sel = lengths == L
        group = dist.probs[sel].sum()
        if group > 0:
            new[sel] = dist.probs[sel] * (kept[L] / kept_mass) / group
    new /= new.sum()
    return ChainDistribution(dist.key, dist.chains, new, dist.sample_count)


def sample_chain(dist: ChainDistribution, prev_last: str, rng):
    """Draw a chain starting with ``prev_last``; None if the distribution has none."""
    sel = [i for i, c in enumerate(dist.chains) if c and c[0] == prev_last]
    if not sel:
        return None
    cdf = np.cumsum(dist.probs[sel])
    if cdf[-1] <= 0:
        return None
    return dist.chains[sel[sample_index(cdf, rng)]]


@dataclass
class ChainTable:
    dists: dict = field(default_factory=dict)  # key -> ChainDistribution
    length_marginals: dict = field(default_factory=dict)  # key -> {length: p}
    min_samples: int = MIN_SAMPLES

    def _usable(self, key):
        d = self.dists.get(key)
        return d is not None and d.sample_count >= self.min_samples and len(d.chains) > 0

    def select(self, key: tuple) -> ChainDistribution:
        for k in cascade(key):
            if self._usable(k):
                return self.dists[k]
        raise BundleError("chain table lacks a usable fully-undefined distribution")

    def sample(self, key: tuple, prev_last: str, rng) -> tuple:
        """Chain for ``key`` that continues ``prev_last``, relaxing the key as needed."""
        self.select(key)
        for k in cascade(key):
            if self._usable(k):
                chain = sample_chain(self.dists[k], prev_last, rng)
                if chain is not None:
                    return chain
        log.warning("no chain starts with %r for key %s; emitting a single-activity day", prev_last, key)
        return (prev_last,)


def select_chain_distribution(features, weekday: str, table: ChainTable) -> ChainDistribution:
    return table.select(tuple(features.as_tuple()) + (weekday,))


# --------------------------------------------------------------------------
# Dwell times


class DwellMixture:
    """Gaussian mixture over the dwell times (hours) of all but the last activity."""

    def __init__(self, weights, means, covariances):
        self.weights = np.atleast_1d(np.asarray(weights, dtype=float))
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covariances, dtype=float)
        k, d = self.means.shape
        self.covariances = covs.reshape(k, d, d)
        if len(self.weights) != k:
            raise BundleError("mixture weights and means disagree on component count")
        if abs(self.weights.sum() - 1.0) > 1e-6 or np.any(self.weights < 0):
            raise BundleError(f"mixture weights must be a distribution, got {self.weights}")
        self._factors = []
        for c in self.covariances:
            if not np.allclose(c, c.T, atol=1e-9):
                raise BundleError("covariance matrix is not symmetric")
            vals, vecs = np.linalg.eigh(c)
            if vals.size and vals.min() < -1e-8 * max(1.0, vals.max()):
                raise BundleError("covariance matrix is not positive semi-definite")
            self._factors.append(vecs * np.sqrt(np.clip(vals, 0, None)))
        self._cdf = np.cumsum(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def draw_hours(self, rng) -> np.ndarray:
        k = sample_index(self._cdf, rng)
        return self.means[k] + self._factors[k] @ rng.standard_normal(self.dim)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, m, c in zip(self.weights, self.means, self.covariances):
            dm = m - mu
            out += w * (c + np.outer(dm, dm))
        return out

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.reshape(len(self.weights), -1).tolist()}

    @classmethod
    def from_dict(cls, rec: dict) -> "DwellMixture":
        return cls(rec["weights"], rec["means"], rec["covariances"])


def truncate_to_day(minutes: np.ndarray, day: float = DAY_MINUTES) -> np.ndarray:
    """Cut dwell times so their running total never passes midnight."""
    start = np.concatenate([[0.0], np.cumsum(minutes)[:-1]])
    return np.clip(np.minimum(minutes, day - start), 0.0, None)


def sample_dwell_times(mixture: DwellMixture | None, rng) -> np.ndarray:
    """Joint dwell draw in minutes for the non-final activities of a chain.

    Draws with a negative coordinate are redrawn up to 100 times, after which
    negatives are clamped to zero.
    """
    if mixture is None or mixture.dim == 0:
        return np.zeros(0)
    for _ in range(MAX_REDRAWS):
        h = mixture.draw_hours(rng)
        if np.all(h >= 0):
            break
    else:
        h = np.clip(h, 0.0, None)
    return truncate_to_day(h * 60.0)


@dataclass
class DwellTable:
    mixtures: dict = field(default_factory=dict)  # (key, chain) -> DwellMixture

    def lookup(self, key: tuple, chain: tuple) -> DwellMixture | None:
        if len(chain) <= 1:
            return None
        for k in cascade(key):
            m = self.mixtures.get((k, tuple(chain)))
            if m is not None:
                return m
        raise BundleError(f"no dwell-time mixture for chain {'-'.join(chain)} under key {key}")


# --------------------------------------------------------------------------
# Day generation


@dataclass
class Activity:
    type: str
    stay: float | None  # minutes; None for the open-ended last activity
    location: int | None = None


@dataclass
class DayPlan:
    weekday: str
    activities: list

    @property
    def chain(self) -> tuple:
        return tuple(a.type for a in self.activities)


class Locator:
    """Assigns buildings to the activities of a chain."""

    def __init__(self, chooser):
        self.chooser = chooser

    def locate(self, agent: Agent, chain, start_location: int, rng) -> list[int]:
        locs = []
        here = start_location
        for i, act in enumerate(chain):
            if i == 0:
                loc = agent.home if act == "home" else start_location
            elif act == "home":
                loc = agent.home
            elif act in ("work", "school"):
                loc = assign_fixed_location(agent, act, self.chooser, rng)
            else:
                loc = self.chooser.choose(here, act, rng)
            locs.append(loc)
            here = loc
        return locs


def generate_day(agent: Agent, weekday: str, prev_last: str, bundle, rng,
                 locator: Locator | None = None, start_location: int | None = None) -> DayPlan:
    key = agent.features.as_tuple() + (weekday,)
    chain = bundle.chains.sample(key, prev_last, rng)
    dwell = sample_dwell_times(bundle.dwell.lookup(key, chain), rng)
    if locator is not None:
        locs = locator.locate(agent, chain, agent.home if start_location is None else start_location, rng)
    else:
        locs = [None] * len(chain)
    acts = [Activity(t, float(dwell[i]) if i < len(chain) - 1 else None, locs[i])
            for i, t in enumerate(chain)]
    return DayPlan(weekday, acts)


def simulate_agent(agent: Agent, days: int, start_weekday: str, bundle, seed: int,
                   locator: Locator | None = None) -> list[DayPlan]:
    rng = agent_rng(seed, agent.id, 1)
    plans = []
    prev_last, loc, wd = "home", agent.home, start_weekday
    for _ in range(days):
        plan = generate_day(agent, wd, prev_last, bundle, rng, locator, loc)
        plans.append(plan)
        prev_last = plan.activities[-1].type
        loc = plan.activities[-1].location
        wd = next_weekday(wd)
    return plans


def simulate(agents, days: int, start_weekday: str, bundle, seed: int = 0,
             locator: Locator | None = None) -> list[list[DayPlan]]:
    if days < 1:
        raise ValueError("days must be >= 1")
    if start_weekday != UNDEFINED and start_weekday not in WEEKDAYS:
        raise ValueError(f"unknown weekday {start_weekday!r}")
    return [simulate_agent(a, days, start_weekday, bundle, seed, locator) for a in agents]
