import csv
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from mobgen.bundle import CalibrationBundle
from mobgen.calibration import SURVEY_COLUMNS, CellTable, SurveyTrip, write_survey
from mobgen.cli import main, schedules_json
from mobgen.ingest import Building
from mobgen.population import Agent, SocioFeatures
from mobgen.schedule import GLOBAL_KEY, Activity, ChainDistribution, ChainTable, DayPlan


def model_args(town, *extra):
    return ["--osm", str(town["osm"]), "--area", str(town["area"]), "--census", str(town["census"]), *extra]


def prepare(town, capsys, *extra):
    assert main(["prepare", *model_args(town, *extra)]) == 0
    return Path(capsys.readouterr().out.strip())


def commuter_survey(table: CellTable, path, n=300, seed=0):
    """Home-work-home and home-shopping-home days over the given cells."""
    rng = np.random.default_rng(seed)
    f = SocioFeatures()
    rows = []
    for p in range(n):
        home, dest = (int(c) for c in rng.choice(table.ids, size=2))
        purpose = "work" if p % 2 else "shopping"
        leave = float(rng.uniform(420, 600))
        back = leave + float(rng.uniform(60, 540))
        rows += [SurveyTrip(str(p), f, "mo", 0, "home", None, home, 0, 0),
                 SurveyTrip(str(p), f, "mo", 1, purpose, home, dest, leave, leave + 15),
                 SurveyTrip(str(p), f, "mo", 2, "home", dest, home, back, back + 15)]
    write_survey(rows, path)
    return path


def test_prepare_reuses_cache(town, cache, capsys, caplog):
    caplog.set_level(logging.INFO, logger="mobgen")
    first = prepare(town, capsys)
    assert (first / "grid.json").is_file() and (first / "cells.json").is_file()
    assert "cache hit" not in caplog.text
    caplog.clear()
    assert prepare(town, capsys) == first
    hits = [r.getMessage() for r in caplog.records if r.getMessage().startswith("cache hit")]
    assert len(hits) == 4


def test_changed_buffer_rebuilds_only_dependents(town, cache, capsys, caplog):
    prepare(town, capsys)
    caplog.set_level(logging.INFO, logger="mobgen")
    prepare(town, capsys, "--buffer", "100")
    text = caplog.text
    assert "cache hit: road graph" in text
    assert "cache hit: buildings" not in text
    assert "cache hit: grid" not in text
    assert "cache hit: distance matrix" not in text


def test_missing_osm_exits_2(town, cache, capsys, tmp_path):
    missing = tmp_path / "nowhere.osm"
    argv = ["prepare", "--osm", str(missing), "--area", str(town["area"])]
    assert main(argv) == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_bundle_exits_3(town, cache, capsys, tmp_path):
    code = main(["simulate", *model_args(town), "--agents", "2", "--bundle", str(tmp_path / "b.json")])
    assert code == 3
    assert "bundle" in capsys.readouterr().err


def test_survey_errors_exit_4(town, cache, capsys, tmp_path):
    cells = prepare(town, capsys) / "cells.json"
    empty = tmp_path / "empty.csv"
    write_survey([], empty)
    assert main(["calibrate", "--survey", str(empty), "--cells", str(cells)]) == 4
    assert "empty survey" in capsys.readouterr().err
    partial = tmp_path / "partial.csv"
    partial.write_text(",".join(c for c in SURVEY_COLUMNS if c != "purpose") + "\n")
    assert main(["calibrate", "--survey", str(partial), "--cells", str(cells)]) == 4
    assert "purpose" in capsys.readouterr().err


def test_bad_arguments(town, cache, capsys):
    assert main(["simulate", *model_args(town), "--agents", "0"]) == 1
    with pytest.raises(SystemExit):
        main(["simulate", *model_args(town), "--weekday", "xx"])


def test_simulate_is_byte_identical(town, cache, capsys, tmp_path):
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        argv = ["simulate", *model_args(town), "--agents", "40", "--days", "3", "--seed", "5", "--out", str(out)]
        assert main(argv) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    doc = json.loads(outs[0])
    assert len(doc) == 40 and all(len(a["days"]) == 3 for a in doc)
    assert [d["weekday"] for d in doc[0]["days"]] == ["mo", "tu", "we"]
    act = doc[0]["days"][0]["activities"][0]
    assert set(act) == {"type", "stayTime", "lat", "lon", "inFocusArea"}
    assert act["type"] == "HOME"
    for agent in doc:
        for day in agent["days"]:
            assert day["activities"][-1]["stayTime"] is None
    argv[argv.index("--seed") + 1] = "6"
    argv[-1] = str(tmp_path / "c.json")
    assert main(argv) == 0
    assert (tmp_path / "c.json").read_bytes() != outs[0]


def test_all_home_bundle(town, cache, capsys, tmp_path):
    chains = ChainTable({GLOBAL_KEY: ChainDistribution(GLOBAL_KEY, [("home",)], [1.0], 100)})
    bundle = tmp_path / "home.json"
    CalibrationBundle(chains=chains).save(bundle)
    assert main(["simulate", *model_args(town), "--agents", "5", "--days", "2", "--bundle", str(bundle)]) == 0
    doc = json.loads(capsys.readouterr().out)
    for agent in doc:
        for day in agent["days"]:
            assert day["activities"] == [{**day["activities"][0], "type": "HOME", "stayTime": None}]
            assert len(day["activities"]) == 1


def test_beeline_mode_warns(town, cache, capsys, caplog):
    directory = prepare(town, capsys, "--dist-metric", "beeline")
    assert "beeline" in caplog.text
    assert not (Path(cache) / "dmat").exists()
    assert (directory / "grid.json").is_file()


def test_calibrate_then_simulate(town, cache, capsys, tmp_path):
    cells = prepare(town, capsys) / "cells.json"
    survey = commuter_survey(CellTable.load(cells), tmp_path / "survey.csv")
    bundle = tmp_path / "bundle.json"
    assert main(["calibrate", "--survey", str(survey), "--cells", str(cells), "--out", str(bundle)]) == 0
    fitted = CalibrationBundle.load(bundle)
    assert fitted.chains.dists[GLOBAL_KEY].sample_count == 300
    out = tmp_path / "s.json"
    assert main(["simulate", *model_args(town), "--agents", "20", "--bundle", str(bundle), "--out", str(out)]) == 0
    types = {a["type"] for agent in json.loads(out.read_text()) for a in agent["days"][0]["activities"]}
    assert types <= {"HOME", "WORK", "SHOPPING"}


def test_validate_identical_inputs(town, cache, capsys, tmp_path):
    cells = prepare(town, capsys) / "cells.json"
    survey = commuter_survey(CellTable.load(cells), tmp_path / "survey.csv", n=120)
    report = tmp_path / "report"
    argv = ["validate", "--survey", str(survey), "--schedules", str(survey), "--cells", str(cells),
            "--resolutions", "500,1000,5000", "--out", str(report)]
    assert main(argv) == 0
    printed = capsys.readouterr().out
    assert [ln for ln in printed.splitlines() if ln.startswith("Trip attraction")] == [
        "Trip attraction, 500 m", "Trip attraction, 1000 m", "Trip attraction, 5000 m"]
    with open(report / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {int(r["resolution"]) for r in rows} == {500, 1000, 5000}
    assert all(float(r["js"]) == 0.0 and float(r["mae"]) == 0.0 for r in rows)
    doc = json.loads((report / "report.json").read_text())
    assert doc["temporal_max_abs_difference"] == 0.0
    assert doc["daily_distance_km"]["model"] == doc["daily_distance_km"]["survey"]
    with open(report / "temporal.csv", newline="") as fh:
        trows = list(csv.reader(fh))[1:]
    shares = np.array([[float(v) for v in r[1:]] for r in trows])
    half = shares.shape[1] // 2
    np.testing.assert_allclose(shares[:, :half].sum(axis=1), 1.0, atol=1e-5)
    for png in ("zonal_attraction.png", "temporal_shares.png", "daily_distance.png"):
        assert (report / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_home_work_home_serialization():
    bs = [Building("w1", 9.9, 49.8, 120.0), Building("w2", 9.95, 49.81, 300.0, in_focus_area=False)]
    agent = Agent(7, SocioFeatures("0-40", "working", "car_full"), home=0)
    day = DayPlan("mo", [Activity("home", 480.0, 0), Activity("work", 510.5, 1), Activity("home", None, 0)])
    doc = json.loads(schedules_json([agent], [[day]], bs))
    assert doc == [{
        "id": 7,
        "features": {"age": "0-40", "homGroup": "working", "mobGroup": "car_full"},
        "days": [{"weekday": "mo", "activities": [
            {"type": "HOME", "stayTime": 480.0, "lat": 49.8, "lon": 9.9, "inFocusArea": True},
            {"type": "WORK", "stayTime": 510.5, "lat": 49.81, "lon": 9.95, "inFocusArea": False},
            {"type": "HOME", "stayTime": None, "lat": 49.8, "lon": 9.9, "inFocusArea": True}]}],
    }]
