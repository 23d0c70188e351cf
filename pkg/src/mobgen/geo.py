"""Small geodesy helpers: haversine distances and a local metric projection."""
from __future__ import annotations

import numpy as np
import shapely
from pyproj import Transformer
from shapely.ops import transform as _transform_geom

EARTH_RADIUS_M = 6371008.8


def haversine(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters. Accepts scalars or broadcastable arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float)) for v in (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


class LocalProjection:
    """Lambert azimuthal equal-area projection centred on a reference point.

    Areas come out in m² and distances near the centre in meters.
    """

    def __init__(self, lon0: float, lat0: float):
        self.lon0 = float(lon0)
        self.lat0 = float(lat0)
        proj = f"+proj=laea +lat_0={self.lat0} +lon_0={self.lon0} +x_0=0 +y_0=0 +ellps=WGS84 +units=m"
        self._fwd = Transformer.from_crs("EPSG:4326", proj, always_xy=True)
        self._inv = Transformer.from_crs(proj, "EPSG:4326", always_xy=True)

    @classmethod
    def for_geometry(cls, geom) -> "LocalProjection":
        c = geom.centroid
        return cls(c.x, c.y)

    def forward(self, lon, lat):
        return self._fwd.transform(lon, lat)

    def inverse(self, x, y):
        return self._inv.transform(x, y)

    def to_xy(self, lon, lat) -> np.ndarray:
        x, y = self._fwd.transform(np.asarray(lon, float), np.asarray(lat, float))
        return np.column_stack([np.atleast_1d(x), np.atleast_1d(y)])

    def project(self, geom):
        return _transform_geom(self._fwd.transform, geom)

    def unproject(self, geom):
        return _transform_geom(self._inv.transform, geom)

    def __repr__(self):
        return f"LocalProjection(lon0={self.lon0:.6f}, lat0={self.lat0:.6f})"


def polygon_parts(geom):
    """Yield the Polygon members of a (multi)polygonal or collection geometry."""
    if geom.is_empty:
        return
    if isinstance(geom, shapely.Polygon):
        yield geom
    elif hasattr(geom, "geoms"):
        for g in geom.geoms:
            yield from polygon_parts(g)
