import csv
import math

import pytest

from valvebot.approach import ControllerParams, approach_scenario, simulate_approach
from valvebot.errors import InvalidInput, UsageError
from valvebot.mission import (
    PHASES, derive_seed, default_scenario_dict, export_trajectory, import_trajectory, robustness_csv, run_mission,
    run_robustness, scenario_from_dict, write_mission_outputs,
)


@pytest.fixture(scope="module")
def default_report():
    return run_mission(scenario_from_dict(default_scenario_dict()))


@pytest.fixture(scope="module")
def short_run():
    scene, start, wps = approach_scenario(50.0)
    return simulate_approach(scene, start, wps, seed=3, t_max=10.0)


def test_derive_seed():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert len({derive_seed(1, "a"), derive_seed(1, "b"), derive_seed(2, "a")}) == 3
    assert 0 <= derive_seed(-5, "x") < 2**32


def test_scenario_validation():
    d = default_scenario_dict()
    with pytest.raises(InvalidInput):
        scenario_from_dict({k: v for k, v in d.items() if k != "seed"})
    with pytest.raises(InvalidInput):
        scenario_from_dict({k: v for k, v in d.items() if k != "scene"})
    with pytest.raises(InvalidInput):
        scenario_from_dict({**d, "controller": {"no_such_gain": 1}})
    with pytest.raises(InvalidInput):
        scenario_from_dict({**d, "wrench": {"target_index": 9}})
    sc = scenario_from_dict({**d, "timing": {"grasp": 3.0}, "perception": {"detector": {"response_threshold": 0.5}}})
    assert sc.timing.grasp == 3.0 and sc.perception.detector.response_threshold == 0.5


def test_scene_file_reference(tmp_path):
    import json
    d = default_scenario_dict()
    (tmp_path / "scene.json").write_text(json.dumps(d["scene"]))
    a = scenario_from_dict({**d, "scene": "scene.json"}, str(tmp_path))
    assert a.scene == scenario_from_dict(d).scene


@pytest.mark.slow
def test_default_mission(default_report):
    r = default_report
    assert [p.name for p in r.phases] == list(PHASES)
    assert r.success, r.table()
    assert all(p.duration >= 0 for p in r.phases)
    assert r.total == pytest.approx(sum(p.duration for p in r.phases))
    assert 60.0 <= r.total <= 120.0
    assert r.phases[PHASES.index("GraspWrench")].duration == 11.6
    assert r.phases[PHASES.index("ContactValve")].duration == 5.6
    # one and a half turns at the 2 rad/s wrist limit
    assert r.phases[PHASES.index("TurnValve")].duration == pytest.approx(3 * math.pi / 2, abs=0.02)
    assert r.details["wrench"]["slot"] == r.details["wrench"]["target_slot"]
    assert r.details["wrench"]["grasp_error_m"] <= 0.01
    assert r.details["valve"]["position_error_m"] <= 0.01


@pytest.mark.slow
def test_report_outputs(default_report, tmp_path):
    paths = write_mission_outputs(default_report, tmp_path)
    rows = list(csv.reader(open(paths["report.csv"])))
    assert rows[0] == ["phase", "sim_time_s", "outcome", "reason"]
    assert [r[0] for r in rows[1:-1]] == list(PHASES)
    assert "wall_clock_s" not in open(paths["report.json"]).read()
    wall = list(csv.reader(open(paths["wall_clock.csv"])))
    assert wall[0] == ["phase", "sim_time_s", "wall_clock_s"]
    assert len(import_trajectory(paths["trajectory.csv"])) == len(default_report.approach.samples) - 1


def test_panel_absent():
    r = run_mission(scenario_from_dict(default_scenario_dict(distance=10.0, panel=False)))
    nav = r.phases[0]
    assert nav.outcome == "failure" and "search-exhausted" in nav.reason
    assert all(p.outcome == "skipped" and p.duration == 0 for p in r.phases[1:])
    assert not r.success
    assert r.total == nav.duration


def test_mid_mission_failure_skips_rest():
    d = default_scenario_dict(distance=6.0)
    d["wrench"] = {"jitter_px": 400.0}
    r = run_mission(scenario_from_dict(d))
    out = {p.name: p.outcome for p in r.phases}
    assert out["ArrivePanel"] == "success"
    assert out["SelectWrench"] == "failure"
    assert all(out[n] == "skipped" for n in PHASES[PHASES.index("GraspWrench"):])


# -- trajectory export -----------------------------------------------------------------


def test_export_rows_and_roundtrip(short_run, tmp_path):
    path = tmp_path / "traj.csv"
    export_trajectory(short_run, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x", "y", "yaw", "speed", "phase"]
    assert len(rows) - 1 == 500
    back = import_trajectory(path)
    assert back == short_run.samples[1:]
    assert max(s.speed for s in back) <= ControllerParams().v_max + 1e-9


def test_export_unwritable(short_run, tmp_path):
    with pytest.raises(OSError):
        export_trajectory(short_run, tmp_path / "missing" / "traj.csv")


def test_import_rejects_other_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(InvalidInput):
        import_trajectory(p)


# -- robustness ------------------------------------------------------------------------


def test_robustness_errors():
    with pytest.raises(UsageError):
        run_robustness("valve-dropout", [], 5)
    with pytest.raises(UsageError):
        run_robustness("bogus", [0.1], 5)
    with pytest.raises(UsageError):
        run_robustness("valve-noise", [0.1], 0)


def test_robustness_valve_points():
    rows = run_robustness("valve-dropout", [0.0, 0.5, 0.9], repeats=2, frames=2)
    assert [v for v, _ in rows] == [0.0, 0.5, 0.9]
    assert rows[0][1] == 1.0 and rows[1][1] == 1.0 and rows[2][1] < 0.9
    rows = run_robustness("valve-noise", [0.0, 0.007], repeats=2, frames=2)
    assert all(r == 1.0 for _, r in rows)


def test_robustness_workers_and_csv():
    a = run_robustness("wrench-jitter", [2.0, 400.0], repeats=3, seed=4)
    b = run_robustness("wrench-jitter", [2.0, 400.0], repeats=3, seed=4, workers=2)
    assert a == b
    assert a[0][1] == 1.0 and a[1][1] < 1.0
    text = robustness_csv("wrench-jitter", a)
    assert text.splitlines()[0] == "kind,param,success_rate"
    assert text.splitlines()[1] == "wrench-jitter,2.0,1.0"
