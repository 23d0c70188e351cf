import json
import math
from xml.sax.saxutils import quoteattr

import numpy as np
import pytest

LON0, LAT0 = 9.9, 49.8
M_LAT = 1 / 111_320.0
M_LON = 1 / (111_320.0 * math.cos(math.radians(LAT0)))


def ll(x, y):
    """Meters east/north of the reference point to lon/lat."""
    return LON0 + x * M_LON, LAT0 + y * M_LAT


class OsmBuilder:
    def __init__(self):
        self.nodes = []  # (id, lon, lat, tags)
        self.ways = []  # (id, refs, tags)
        self._nid = 1
        self._wid = 1

    def node(self, x, y, **tags):
        nid = self._nid
        self._nid += 1
        lon, lat = ll(x, y)
        self.nodes.append((nid, lon, lat, tags))
        return nid

    def way(self, refs, wid=None, **tags):
        if wid is None:
            wid = self._wid
            self._wid += 1
        self.ways.append((wid, list(refs), tags))
        return wid

    def rect(self, x0, y0, x1, y1, wid=None, **tags):
        refs = [self.node(x0, y0), self.node(x1, y0), self.node(x1, y1), self.node(x0, y1)]
        return self.way(refs + refs[:1], wid=wid, **tags)

    def xml(self) -> str:
        out = ['<?xml version="1.0" encoding="UTF-8"?>', '<osm version="0.6" generator="tests">']
        for nid, lon, lat, tags in self.nodes:
            if tags:
                out.append(f'  <node id="{nid}" version="1" lat="{lat:.8f}" lon="{lon:.8f}">')
                out += [f"    <tag k={quoteattr(k)} v={quoteattr(str(v))}/>" for k, v in tags.items()]
                out.append("  </node>")
            else:
                out.append(f'  <node id="{nid}" version="1" lat="{lat:.8f}" lon="{lon:.8f}"/>')
        for wid, refs, tags in sorted(self.ways):
            out.append(f'  <way id="{wid}" version="1">')
            out += [f'    <nd ref="{r}"/>' for r in refs]
            out += [f"    <tag k={quoteattr(k)} v={quoteattr(str(v))}/>" for k, v in tags.items()]
            out.append("  </way>")
        out.append("</osm>")
        return "\n".join(out) + "\n"

    def write(self, path):
        path.write_text(self.xml(), encoding="utf-8")
        return path


def polygon_geojson(rings_xy, props=None):
    coords = [[list(ll(x, y)) for x, y in ring] for ring in rings_xy]
    return {"type": "Feature", "properties": props or {}, "geometry": {"type": "Polygon", "coordinates": coords}}


def rect_ring(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]


def write_geojson(path, features):
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}), encoding="utf-8")
    return path


def build_town(tmp_path, blocks=4, spacing=250.0, seed=0):
    """Road grid with buildings in every block, a retail zone, POIs, census."""
    rng = np.random.default_rng(seed)
    b = OsmBuilder()
    n = blocks + 1
    grid = [[b.node(i * spacing, j * spacing) for i in range(n)] for j in range(n)]
    for j in range(n):
        b.way(grid[j], wid=10_000 + j, highway="residential")
    for i in range(n):
        b.way([grid[j][i] for j in range(n)], wid=20_000 + i, highway="secondary")
    b.way([b.node(-50, -50), b.node(-50, -150)], wid=29_999, highway="footway")
    wid = 100
    for bi in range(blocks):
        for bj in range(blocks):
            x0, y0 = bi * spacing + 30, bj * spacing + 30
            for k in range(4):
                dx, dy = (k % 2) * 100, (k // 2) * 100
                w, h = rng.uniform(20, 60, size=2)
                tags = {"building": "yes"}
                if bi == 0 and bj == 0 and k == 0:
                    tags["shop"] = "bakery"
                b.rect(x0 + dx, y0 + dy, x0 + dx + w, y0 + dy + h, wid=wid, **tags)
                wid += 1
                if rng.random() < 0.3:
                    b.node(x0 + dx + w / 2, y0 + dy + h / 2, shop="kiosk")
                if rng.random() < 0.2:
                    b.node(x0 + dx + w / 3, y0 + dy + h / 3, office="company")
    b.rect(spacing - 5, spacing - 5, 2 * spacing + 5, 2 * spacing + 5, wid=9000, landuse="retail")
    b.rect(-5, 2 * spacing - 5, spacing + 5, 3 * spacing + 5, wid=9001, landuse="residential")
    b.node(spacing * 2 + 60, spacing * 2 + 60, amenity="school")
    osm = b.write(tmp_path / "town.osm")
    ext = blocks * spacing
    area = write_geojson(tmp_path / "area.geojson", [polygon_geojson([rect_ring(0, 0, ext, ext)])])
    census = write_geojson(tmp_path / "census.geojson", [
        polygon_geojson([rect_ring(0, 0, ext / 2, ext)], {"population": 600}),
        polygon_geojson([rect_ring(ext / 2, 0, ext, ext)], {"population": 400}),
    ])
    return {"osm": osm, "area": area, "census": census}


@pytest.fixture
def town(tmp_path):
    return build_town(tmp_path)


@pytest.fixture
def cache(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("MOBGEN_CACHE", str(d))
    return d


# --------------------------------------------------------------------------
# acceptance verdicts, printed once per criterion at the end of the run

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    store = request.config.stash[VERDICTS]

    def record(number, title, ok, detail):
        store[number] = (title, bool(ok), detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[VERDICTS]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        if n in store:
            title, ok, detail = store[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN")
