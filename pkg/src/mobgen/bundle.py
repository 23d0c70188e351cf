"""CalibrationBundle: every fitted parameter the simulator consumes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import PURPOSES
from .destination import DEFAULT_ATTRACTION, DEFAULT_DETERRENCE, FEATURES, Deterrence
from .errors import BundleError
from .schedule import ChainDistribution, ChainTable, DwellMixture, DwellTable

BUNDLE_SCHEMA = "mobgen.bundle/1"
_KEY_FIELDS = ("age", "hom_group", "mob_group", "weekday")


def _key_to_json(key) -> dict:
    return dict(zip(_KEY_FIELDS, key))


def _key_from_json(rec) -> tuple:
    return tuple(rec[f] for f in _KEY_FIELDS)


@dataclass
class CalibrationBundle:
    attraction: dict = field(default_factory=lambda: {p: v.copy() for p, v in DEFAULT_ATTRACTION.items()})
    deterrence: dict = field(default_factory=lambda: dict(DEFAULT_DETERRENCE))
    chains: ChainTable = field(default_factory=ChainTable)
    dwell: DwellTable = field(default_factory=DwellTable)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        chains = []
        for key in sorted(self.chains.dists):
            d = self.chains.dists[key]
            marg = self.chains.length_marginals.get(key, {})
            chains.append({
                "key": _key_to_json(key),
                "sample_count": int(d.sample_count),
                "chains": [{"activities": list(c), "p": float(p)} for c, p in zip(d.chains, d.probs)],
                "length_marginals": {str(L): float(p) for L, p in sorted(marg.items())},
            })
        dwell = []
        for (key, chain) in sorted(self.dwell.mixtures):
            m = self.dwell.mixtures[(key, chain)]
            dwell.append({"key": _key_to_json(key), "chain": list(chain), **m.to_dict()})
        return {
            "schema": BUNDLE_SCHEMA,
            "meta": self.meta,
            "features": list(FEATURES),
            "attraction": {p: np.asarray(self.attraction[p]).tolist() for p in PURPOSES},
            "deterrence": {p: (None if self.deterrence.get(p) is None else self.deterrence[p].to_dict())
                           for p in PURPOSES},
            "chains": chains,
            "dwell": dwell,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CalibrationBundle":
        if doc.get("schema") != BUNDLE_SCHEMA:
            raise BundleError(f"unsupported bundle schema {doc.get('schema')!r}")
        try:
            attraction = {p: np.asarray(doc["attraction"][p], dtype=float) for p in PURPOSES}
            for p, th in attraction.items():
                if th.shape != (len(FEATURES),):
                    raise BundleError(f"attraction vector for {p} must have {len(FEATURES)} entries")
                if np.any(th < 0):
                    raise BundleError(f"attraction coefficients for {p} must be >= 0")
            deterrence = {p: (None if doc["deterrence"].get(p) is None
                              else Deterrence.from_dict(doc["deterrence"][p])) for p in PURPOSES}
            table = ChainTable()
            for rec in doc["chains"]:
                key = _key_from_json(rec["key"])
                table.dists[key] = ChainDistribution(
                    key, [tuple(c["activities"]) for c in rec["chains"]],
                    [c["p"] for c in rec["chains"]], int(rec["sample_count"]))
                table.length_marginals[key] = {int(L): float(p) for L, p in rec.get("length_marginals", {}).items()}
            dwell = DwellTable()
            for rec in doc["dwell"]:
                dwell.mixtures[(_key_from_json(rec["key"]), tuple(rec["chain"]))] = DwellMixture.from_dict(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"malformed bundle: {exc!r}") from exc
        bundle = cls(attraction, deterrence, table, dwell, dict(doc.get("meta") or {}))
        bundle.chains.select(("undefined",) * 4)  # must have a global fallback
        return bundle

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "CalibrationBundle":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except ValueError as exc:
            raise BundleError(f"{path}: {exc}") from exc
        return cls.from_json(doc)


def default_bundle() -> CalibrationBundle:
    """Shipped bundle: published attraction/deterrence coefficients plus
    chain and dwell tables fitted to a synthetic survey (not real survey data)."""
    ref = resources.files("mobgen") / "data" / "default_bundle.json"
    with ref.open(encoding="utf-8") as fh:
        return CalibrationBundle.from_json(json.load(fh))
