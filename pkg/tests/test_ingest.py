import json
import math

import numpy as np
import osmium
import pytest
import shapely
from pyproj import Geod

from mobgen.errors import EmptyAreaError, EmptyModelError, ParseError, SchemaError
from mobgen.ingest import (BUILDING_FIELDS, AreaGeometry, Building, CensusCell, apply_census, buffer_area,
                           extract_buildings, load_buildings, parse_focus_area, read_census, read_osm,
                           save_buildings, total_population)

from conftest import OsmBuilder, ll, polygon_geojson, rect_ring, write_geojson

GEOD = Geod(ellps="WGS84")


def geod_area(geom):
    return abs(GEOD.geometry_area_perimeter(geom)[0])


def five_buildings(tmp_path):
    b = OsmBuilder()
    b.rect(0, 0, 20, 20, wid=1, building="yes")
    b.rect(100, 0, 130, 30, wid=2, building="house")
    b.rect(0, 100, 20, 120, wid=3, building="yes")
    b.rect(100, 100, 140, 140, wid=4, building="university", amenity="university")
    b.rect(300, 300, 320, 320, wid=5, building="yes")
    b.rect(200, 0, 220, 20, wid=6, building="no")
    b.rect(-10, -10, 50, 50, wid=50, landuse="retail")
    b.rect(90, -10, 200, 50, wid=51, landuse="industrial")
    b.rect(90, 90, 200, 200, wid=52, landuse="residential")
    b.node(10, 10, shop="bakery")
    b.node(110, 10, office="lawyer")
    b.node(120, 20, office="it")
    b.node(10, 110, amenity="school")
    b.node(15, 115, shop="kiosk")
    b.node(60, 60, shop="orphan")
    b.way([b.node(-50, -50), b.node(400, -50)], wid=70, highway="footway")
    osm = b.write(tmp_path / "five.osm")
    area = write_geojson(tmp_path / "focus.geojson", [polygon_geojson([rect_ring(-20, -20, 250, 250)])])
    return osm, area


# hand count: (landuse, shops, offices, schools, universities, in focus)
EXPECTED = {
    "w1": ("commercial", 1, 0, 0, 0, True),
    "w2": ("industrial", 0, 2, 0, 0, True),
    "w3": ("none", 1, 0, 1, 0, True),
    "w4": ("residential", 0, 0, 0, 1, True),
    "w5": ("none", 0, 0, 0, 0, False),
}


def test_five_building_feature_table(tmp_path):
    osm, area_path = five_buildings(tmp_path)
    area = buffer_area(parse_focus_area(area_path), 200)
    got = extract_buildings(osm, area)
    assert [b.id for b in got] == list(EXPECTED)
    for bld in got:
        exp = EXPECTED[bld.id]
        assert (bld.landuse, bld.n_shops, bld.n_offices, bld.n_schools, bld.n_universities,
                bld.in_focus_area) == exp, bld.id
        assert bld.population == 0


def test_footprint_area_and_centroid(tmp_path):
    osm, area_path = five_buildings(tmp_path)
    got = {b.id: b for b in extract_buildings(osm, parse_focus_area(area_path))}
    assert "w5" not in got  # outside the unbuffered area
    assert got["w1"].area == pytest.approx(400, rel=0.01)
    assert got["w4"].area == pytest.approx(1600, rel=0.01)
    lon, lat = ll(10, 10)
    assert got["w1"].lon == pytest.approx(lon, abs=1e-6)
    assert got["w1"].lat == pytest.approx(lat, abs=1e-6)
    assert got["w1"].area == pytest.approx(geod_area(got["w1"].footprint), rel=1e-3)


def test_pbf_and_xml_agree(tmp_path):
    osm, area_path = five_buildings(tmp_path)
    pbf = tmp_path / "five.osm.pbf"
    with osmium.SimpleWriter(str(pbf), overwrite=True) as w:
        for obj in osmium.FileProcessor(str(osm)):
            if obj.is_node():
                w.add_node(obj)
            elif obj.is_way():
                w.add_way(obj)
    area = buffer_area(parse_focus_area(area_path), 200)
    a = [b.to_record() for b in extract_buildings(osm, area)]
    b = [b.to_record() for b in extract_buildings(pbf, area)]
    assert a == b


def test_extraction_is_deterministic(tmp_path):
    osm, area_path = five_buildings(tmp_path)
    area = buffer_area(parse_focus_area(area_path), 200)
    p1, p2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    save_buildings(extract_buildings(osm, area), p1)
    save_buildings(extract_buildings(read_osm(osm), area), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_building_table_roundtrip(tmp_path):
    osm, area_path = five_buildings(tmp_path)
    got = extract_buildings(osm, parse_focus_area(area_path))
    path = tmp_path / "b.ndjson"
    save_buildings(got, path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert tuple(rec) == BUILDING_FIELDS
    back = load_buildings(path)
    assert [b.to_record() for b in back] == [b.to_record() for b in got]


def test_missing_field_in_building_record():
    with pytest.raises(SchemaError, match="landuse"):
        Building.from_record({k: 0 for k in BUILDING_FIELDS if k != "landuse"})


def test_no_buildings_in_area(tmp_path):
    osm, _ = five_buildings(tmp_path)
    far = write_geojson(tmp_path / "far.geojson", [polygon_geojson([rect_ring(5000, 5000, 6000, 6000)])])
    with pytest.raises(EmptyModelError):
        extract_buildings(osm, parse_focus_area(far))


def test_unreadable_osm(tmp_path):
    bad = tmp_path / "bad.osm"
    bad.write_text("<osm><node id='1' lat='x'")
    with pytest.raises(ParseError):
        read_osm(bad)
    with pytest.raises(FileNotFoundError):
        read_osm(tmp_path / "missing.osm")


# --------------------------------------------------------------------------
# focus area and buffer


def test_single_square_is_identity(tmp_path):
    ring = rect_ring(0, 0, 500, 500)
    path = write_geojson(tmp_path / "a.geojson", [polygon_geojson([ring])])
    area = parse_focus_area(path)
    assert area.role == "focus"
    expect = shapely.Polygon([ll(x, y) for x, y in ring])
    assert area.geometry.equals(expect)


def test_disjoint_polygons_union(tmp_path):
    path = write_geojson(tmp_path / "a.geojson", [polygon_geojson([rect_ring(0, 0, 100, 100)]),
                                                  polygon_geojson([rect_ring(500, 0, 600, 100)])])
    area = parse_focus_area(path)
    assert area.geometry.geom_type == "MultiPolygon"
    assert len(area.polygons) == 2


def test_polygon_with_hole_area(tmp_path):
    path = write_geojson(tmp_path / "a.geojson", [polygon_geojson([rect_ring(0, 0, 1000, 1000),
                                                                   rect_ring(200, 200, 400, 400)[::-1]])])
    area = parse_focus_area(path)
    outer = shapely.Polygon([ll(x, y) for x, y in rect_ring(0, 0, 1000, 1000)])
    hole = shapely.Polygon([ll(x, y) for x, y in rect_ring(200, 200, 400, 400)])
    assert area.area_m2() == pytest.approx(geod_area(outer) - geod_area(hole), rel=1e-3)


def test_geojson_errors(tmp_path):
    p = tmp_path / "bad.geojson"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        parse_focus_area(p)
    pts = tmp_path / "pts.geojson"
    pts.write_text(json.dumps({"type": "Feature", "properties": {},
                               "geometry": {"type": "Point", "coordinates": [9.9, 49.8]}}))
    with pytest.raises(EmptyAreaError):
        parse_focus_area(pts)


def test_buffer_zero_is_unchanged(tmp_path):
    path = write_geojson(tmp_path / "a.geojson", [polygon_geojson([rect_ring(0, 0, 300, 300)])])
    area = parse_focus_area(path)
    buf = buffer_area(area, 0)
    assert buf.geometry.equals(area.geometry)
    assert buf.role == "focus+buffer"
    with pytest.raises(ValueError):
        buffer_area(area, -1)


def test_buffer_square_matches_dilation_formula(tmp_path):
    a = 1000.0
    path = write_geojson(tmp_path / "a.geojson", [polygon_geojson([rect_ring(0, 0, a, a)])])
    buf = buffer_area(parse_focus_area(path), 500)
    expect = a * a + 4 * a * 500 + math.pi * 500 ** 2
    assert geod_area(buf.geometry) == pytest.approx(expect, rel=0.01)
    assert buf.focus.equals(parse_focus_area(path).geometry)


def test_buffer_ring_keeps_vertices_inside(tmp_path):
    ring = [(0, 0), (800, -100), (1200, 400), (700, 900), (100, 600), (0, 0)]
    path = write_geojson(tmp_path / "a.geojson", [polygon_geojson([ring])])
    area = parse_focus_area(path)
    buf = buffer_area(area, 500)
    proj = buf.projection()
    boundary = proj.project(buf.geometry).exterior
    for x, y in area.geometry.exterior.coords:
        p = proj.project(shapely.Point(x, y))
        assert boundary.distance(p) >= 499.0


# --------------------------------------------------------------------------
# census


def _bldg(i, x0, y0, x1, y1):
    foot = shapely.Polygon([ll(x, y) for x, y in rect_ring(x0, y0, x1, y1)])
    c = foot.centroid
    return Building(f"w{i}", c.x, c.y, 100.0, footprint=foot)


def _cell(x0, y0, x1, y1, pop):
    return CensusCell(shapely.Polygon([ll(x, y) for x, y in rect_ring(x0, y0, x1, y1)]), pop)


def test_census_uniform_split():
    bs = [_bldg(i, 10 + 30 * i, 10, 30 + 30 * i, 30) for i in range(4)]
    apply_census(bs, [_cell(0, 0, 200, 100, 100)])
    assert [b.population for b in bs] == [25, 25, 25, 25]


def test_census_building_in_two_cells():
    straddle = _bldg(0, 90, 10, 110, 30)
    others = [_bldg(i, 120 + 20 * i, 10, 130 + 20 * i, 20) for i in range(1, 3)]
    bs = [straddle] + others
    apply_census(bs, [_cell(0, 0, 100, 100, 100), _cell(100, 0, 200, 100, 60)])
    assert straddle.population == pytest.approx(120)
    assert [b.population for b in others] == [20, 20]


def test_census_total_preserved_and_untouched_zero():
    rng = np.random.default_rng(3)
    bs = [_bldg(i, x, y, x + 15, y + 15) for i, (x, y) in enumerate(rng.uniform(0, 900, size=(60, 2)))]
    lonely = _bldg(99, 5000, 5000, 5010, 5010)
    cells = [_cell(i * 250, j * 250, (i + 1) * 250, (j + 1) * 250, float(rng.integers(0, 500)))
             for i in range(5) for j in range(5)]
    apply_census(bs + [lonely], cells)
    touched = sum(c.population for c in cells
                  if any(c.geometry.intersects(b.footprint) for b in bs))
    assert total_population(bs) == pytest.approx(touched, rel=1e-9)
    assert lonely.population == 0


def test_no_census_keeps_zero():
    bs = [_bldg(0, 0, 0, 10, 10)]
    apply_census(bs, None)
    assert bs[0].population == 0


def test_census_missing_property(tmp_path):
    path = write_geojson(tmp_path / "c.geojson", [polygon_geojson([rect_ring(0, 0, 10, 10)], {"pop": 3})])
    with pytest.raises(SchemaError, match="population"):
        read_census(path)
    assert read_census(path, "pop")[0].population == 3


def test_area_geometry_default_focus():
    g = shapely.box(9.9, 49.8, 9.91, 49.81)
    a = AreaGeometry(g)
    assert a.focus is g and a.role == "focus"
