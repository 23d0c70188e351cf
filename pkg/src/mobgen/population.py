"""Agents: socio-demographic features, homes and fixed work/school places."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .destination import sample_index
from .errors import SchemaError

UNDEFINED = "undefined"
AGE_GROUPS = ("0-40", "40-60", "60-100", UNDEFINED)
HOM_GROUPS = ("working", "non_working", "student", UNDEFINED)
MOB_GROUPS = ("car_full", "car_mixed", "car_none", UNDEFINED)


@dataclass(frozen=True)
class SocioFeatures:
    age: str = UNDEFINED
    hom_group: str = UNDEFINED
    mob_group: str = UNDEFINED

    def __post_init__(self):
        for value, allowed, name in ((self.age, AGE_GROUPS, "age"),
                                     (self.hom_group, HOM_GROUPS, "hom_group"),
                                     (self.mob_group, MOB_GROUPS, "mob_group")):
            if value not in allowed:
                raise SchemaError(f"invalid {name} {value!r}; expected one of {allowed}")

    def as_tuple(self) -> tuple:
        return (self.age, self.hom_group, self.mob_group)

    def to_dict(self) -> dict:
        return {"age": self.age, "homGroup": self.hom_group, "mobGroup": self.mob_group}


class SocioDistribution:
    """Joint distribution over feature tuples, given as probability atoms."""

    def __init__(self, atoms):
        feats, probs = [], []
        for atom in atoms:
            try:
                if isinstance(atom, dict):
                    f = SocioFeatures(atom["age"], atom["hom_group"], atom["mob_group"])
                    p = float(atom["probability"])
                else:
                    *vals, p = atom
                    f = SocioFeatures(*vals)
                    p = float(p)
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"malformed distribution atom {atom!r}: {exc}") from None
            if p < 0 or not math.isfinite(p):
                raise SchemaError(f"atom probability must be finite and >= 0: {atom!r}")
            feats.append(f)
            probs.append(p)
        if not feats:
            raise SchemaError("socio-demographic distribution has no atoms")
        total = math.fsum(probs)
        if abs(total - 1.0) > 1e-9:
            raise SchemaError(f"socio-demographic distribution sums to {total!r}, not 1")
        self.features = feats
        self.probs = np.asarray(probs)
        self._cdf = np.cumsum(self.probs)

    @classmethod
    def from_json(cls, path) -> "SocioDistribution":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def sample(self, rng) -> SocioFeatures:
        return self.features[sample_index(self._cdf, rng)]


def sample_sociodemographics(dist: SocioDistribution | None, rng) -> SocioFeatures:
    if dist is None:
        return SocioFeatures()
    return dist.sample(rng)


@dataclass
class Agent:
    id: int
    features: SocioFeatures
    home: int
    work: int | None = None
    school: int | None = None


def home_weights(buildings) -> np.ndarray:
    return np.array([b.population for b in buildings], dtype=float)


def sample_home(buildings, rng, chooser=None, _cdf=None) -> int:
    """Home by population share; falls back to attraction-only choice when the
    area has no census population."""
    cdf = _cdf if _cdf is not None else np.cumsum(home_weights(buildings))
    if len(cdf) and cdf[-1] > 0:
        return sample_index(cdf, rng)
    if chooser is None:
        raise ValueError("no census population and no destination chooser for the fallback")
    return chooser.choose_without_distance("home", rng)


def assign_fixed_location(agent: Agent, purpose: str, chooser, rng) -> int:
    """Workplace or school drawn once from the agent's home, then kept."""
    if purpose not in ("work", "school"):
        raise ValueError(f"{purpose!r} is not a fixed-location purpose")
    current = getattr(agent, purpose)
    if current is None:
        current = chooser.choose(agent.home, purpose, rng)
        setattr(agent, purpose, current)
    return current


def agent_rng(seed: int, agent_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(agent_id), int(stream)])


def create_population(n: int, buildings, seed: int = 0, chooser=None,
                      socio: SocioDistribution | None = None) -> list[Agent]:
    """``n`` agents with features and homes; work/school are left for later."""
    if n < 1:
        raise ValueError(f"number of agents must be >= 1, got {n}")
    cdf = np.cumsum(home_weights(buildings))
    agents = []
    for i in range(n):
        rng = agent_rng(seed, i, 0)
        feats = sample_sociodemographics(socio, rng)
        home = sample_home(buildings, rng, chooser, _cdf=cdf)
        agents.append(Agent(id=i, features=feats, home=home))
    return agents
