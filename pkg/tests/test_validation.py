import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import floyd_warshall
from scipy.spatial.distance import jensenshannon

from mobgen.calibration import SurveyTrip
from mobgen.population import SocioFeatures
from mobgen.routing import BeelineRouter, GraphRouter, RoadGraph
from mobgen.validation import (STATES, MetricReport, Stop, daily_distance, daily_distances, format_table, js_divergence,
                               mae_percent, od_metrics, r_squared, schedule_timeline, schedule_trips,
                               summarize_distances, survey_timeline, temporal_difference, temporal_shares,
                               zonal_attraction)

from conftest import ll

P = np.array([0.4, 0.3, 0.2, 0.1])
Q = P[::-1].copy()


def test_hand_metrics():
    assert js_divergence(P, Q) == pytest.approx(jensenshannon(P, Q) ** 2, abs=1e-12)
    assert r_squared(P, Q) == pytest.approx(-3.0)
    assert mae_percent(P, Q) == pytest.approx(20.0)
    assert js_divergence([1, 0], [0, 1]) == pytest.approx(math.log(2))
    assert js_divergence(P, P) == 0.0
    assert r_squared(P, P) == 1.0
    assert math.isnan(r_squared([1, 2], [3, 3]))


prob = st.lists(st.floats(0, 1), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-6)


@settings(max_examples=200, deadline=None)
@given(prob, st.integers(0, 2**31 - 1))
def test_js_properties(p, seed):
    q = np.random.default_rng(seed).dirichlet(np.ones(len(p)))
    a, b = js_divergence(p, q), js_divergence(q, p)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= math.log(2)
    assert js_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


def zone_points(counts, res=1000.0):
    """Points at the centres of a row of zones, ``counts[i]`` in zone i."""
    pts = []
    for i, c in enumerate(counts):
        pts += [ll(res * i + res / 2, res / 2)] * c
    return np.array(pts)


BBOX = (*ll(0, 0), *ll(4000, 1000))


def test_zonal_hand_example_and_identity():
    rep = zonal_attraction(zone_points([4, 3, 2, 1]), zone_points([1, 2, 3, 4]), 1000, bbox=BBOX)
    assert rep.n_zones == 4
    assert rep.r2 == pytest.approx(-3.0)
    assert rep.mae == pytest.approx(20.0)
    assert rep.js == pytest.approx(jensenshannon(P, Q) ** 2)
    same = zonal_attraction(zone_points([4, 3, 2, 1]), zone_points([4, 3, 2, 1]), 1000, bbox=BBOX)
    assert (same.r2, same.mae, same.js) == (1.0, 0.0, 0.0)


def test_zonal_is_permutation_invariant():
    rng = np.random.default_rng(0)
    m = zone_points([5, 1, 7, 2])
    s = zone_points([3, 3, 1, 6])
    a = zonal_attraction(m, s, 1000, bbox=BBOX)
    b = zonal_attraction(m[rng.permutation(len(m))], s[rng.permutation(len(s))], 1000, bbox=BBOX)
    assert a == b


def od_points(matrix, res=1000.0):
    rows = []
    for i, row in enumerate(matrix):
        for j, c in enumerate(row):
            rows += [(*ll(res * i + res / 2, res / 2), *ll(res * j + res / 2, res / 2))] * int(c)
    return np.array(rows)


def test_od_two_by_two():
    rep = od_metrics(od_points([[3, 1], [1, 5]]), od_points([[2, 2], [2, 4]]), 1000)
    assert rep.n_zones == 4
    assert rep.r2 == pytest.approx(1 - 0.04 / 0.03)
    assert rep.mae == pytest.approx(10.0)
    assert rep.js == pytest.approx(jensenshannon([.3, .1, .1, .5], [.2, .2, .2, .4]) ** 2)
    same = od_metrics(od_points([[3, 1], [1, 5]]), od_points([[3, 1], [1, 5]]), 1000)
    assert same.r2 == 1.0 and same.js == 0.0


def test_scrambled_flows_keep_attraction_but_fail_od():
    w = np.array([10, 20, 30, 40])
    survey = np.diag(w)
    model = np.outer(w, w) // 100  # same row and column totals, flows spread out
    assert np.array_equal(model.sum(axis=0), w) and np.array_equal(model.sum(axis=1), w)
    m, s = od_points(model), od_points(survey)
    zonal = zonal_attraction(m[:, 2:], s[:, 2:], 1000)
    od = od_metrics(m, s, 1000)
    assert zonal.r2 == pytest.approx(1.0)
    assert od.r2 < 0.3
    assert od.js > 0.3


def test_empty_trip_sets():
    with pytest.raises(ValueError):
        zonal_attraction(np.zeros((0, 2)), zone_points([1]), 500)


# --------------------------------------------------------------------------
# distances


def stop(t, x, y, stay=None):
    return Stop(t, stay, *ll(x, y))


def test_all_home_distance_is_zero():
    agents = [[[stop("home", 0, 0)]] * 3] * 4
    s = daily_distance(agents, BeelineRouter())
    assert (s.q25, s.median, s.q75, s.mean, s.ci95) == (0, 0, 0, 0, 0)


def test_single_round_trip():
    agents = [[[stop("home", 0, 0, 400), stop("work", 5000, 0, 500), stop("home", 0, 0)]]]
    s = daily_distance(agents, BeelineRouter())
    assert s.mean == pytest.approx(10.0, rel=2e-3)
    trips = schedule_trips(agents)
    assert trips.shape == (2, 5)
    assert trips[:, 4].tolist() == [1, 0]


def test_routed_distances_match_direct_summation():
    rng = np.random.default_rng(0)
    n = 40
    xy = rng.uniform(0, 6000, size=(n, 2))
    lon, lat = np.array([ll(x, y) for x, y in xy]).T
    edges = [(i, i + 1, float(rng.uniform(100, 900))) for i in range(n - 1)]
    edges += [(int(a), int(b), float(rng.uniform(100, 3000))) for a, b in rng.integers(0, n, size=(60, 2)) if a != b]
    g = RoadGraph.from_edges(lon, lat, edges)
    w = np.zeros((n, n))
    for a, b, c in edges:
        if w[a, b] == 0 or c < w[a, b]:
            w[a, b] = w[b, a] = c
    oracle = floyd_warshall(csr_matrix(w), directed=False)
    agents, expect = [], []
    for _ in range(100):
        nodes = rng.integers(0, n, size=int(rng.integers(1, 5)))
        day = [Stop("other", 60.0, lon[k], lat[k]) for k in nodes]
        agents.append([day])
        expect.append(sum(oracle[a, b] for a, b in zip(nodes, nodes[1:])) / 1000)
    np.testing.assert_allclose(daily_distances(agents, GraphRouter(g)), expect, rtol=1e-12)


def test_mean_is_linear_under_concatenation():
    rng = np.random.default_rng(1)
    a, b = rng.exponential(20, 30), rng.exponential(5, 70)
    whole = summarize_distances(np.concatenate([a, b])).mean
    assert whole == pytest.approx((30 * a.mean() + 70 * b.mean()) / 100)
    with pytest.raises(ValueError):
        summarize_distances([])


# --------------------------------------------------------------------------
# temporal shares


def test_hand_timeline():
    router = BeelineRouter(speed_kmh=30)
    day = [stop("home", 0, 0, 480), stop("work", 5000, 0, 480), stop("home", 0, 0)]
    tl = schedule_timeline([day], router)
    travel = router.travel_time(day[0][2:], day[1][2:]) / 60
    assert travel == pytest.approx(10.0, rel=2e-3)
    times, shares = temporal_shares([tl], step=1.0)
    work = shares[:, STATES.index("work")]
    inside = (times >= 480 + travel) & (times < 960 + travel)
    assert np.all(work[inside] == 1.0)
    assert np.all(work[~inside] == 0.0)
    moving = shares[:, STATES.index("moving")]
    assert moving[(times >= 480) & (times < 480 + travel)].min() == 1.0
    np.testing.assert_allclose(shares.sum(axis=1), 1.0, atol=1e-12)


def test_everyone_home_all_week():
    tls = [schedule_timeline([[stop("home", 0, 0)]] * 7, BeelineRouter()) for _ in range(5)]
    times, shares = temporal_shares(tls, step=30)
    assert times[-1] == 7 * 1440 - 30
    assert np.all(shares[:, STATES.index("home")] == 1.0)


def test_identical_sets_have_zero_difference():
    router = BeelineRouter()
    rng = np.random.default_rng(2)
    tls = []
    for _ in range(20):
        day = [stop("home", 0, 0, float(rng.uniform(300, 600))),
               stop("shopping", float(rng.uniform(0, 4000)), 0, float(rng.uniform(20, 90))), stop("home", 0, 0)]
        tls.append(schedule_timeline([day], router))
    a = temporal_shares(tls, horizon=1440)[1]
    b = temporal_shares(list(tls), horizon=1440)[1]
    assert temporal_difference(a, b) == 0.0
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_survey_timeline():
    f = SocioFeatures()
    rows = [SurveyTrip("p", f, "mo", 2, "home", 2, 1, 1000, 1030),
            SurveyTrip("p", f, "mo", 0, "home", None, 1, 0, 0),
            SurveyTrip("p", f, "mo", 1, "work", 1, 2, 480, 500)]
    assert survey_timeline(rows) == [("home", 0.0, 480), ("moving", 480, 500), ("work", 500, 1000),
                                      ("moving", 1000, 1030), ("home", 1030, 1440.0)]


def test_table_layout():
    text = format_table([("shopping", 500, MetricReport(0.5, 0.1, 0.2, 10)),
                         ("shopping", 5000, MetricReport(-0.054, 1.25, 0.632, 3))])
    lines = text.splitlines()
    assert lines[0].split() == ["Activity", "Resolution", "R²", "MAE", "Jensen-Shannon"]
    assert lines[3].split() == ["shopping", "5000", "m", "-0.054", "1.250", "0.632"]
