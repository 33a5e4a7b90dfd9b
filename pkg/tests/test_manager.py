import itertools
import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from sitebot.cli import main as cli_main
from sitebot.geometry import Pose, raycast_bruteforce
from sitebot.manager import (
    D_NAV, D_WB, IllegalTransition, ManagerConfig, ManagerMode as M, ModeTracker, ReferenceHint,
    RunReport, Runtime, Task, TaskReport, ViewpointError, grid_offsets, pairwise_relative_errors,
    plan_hal_viewpoints, replay_estimates, run_loop, run_scenario, run_task, select_mode,
    task_from_dict, tasks_from_scenario, wall_target,
)
from sitebot.sim import default_rangefinders, planned_room_mesh, scenario_from_dict

ROOM = [[0, 0], [8, 0], [8, 6], [0, 6]]
ZERO_NOISE = {"rangefinder_sigma": 0.0, "lidar_sigma": 0.0, "gyro_noise_density": 0.0,
              "accel_noise_density": 0.0, "gyro_bias": [0, 0, 0], "accel_bias": [0, 0, 0],
              "encoder_sigma": 0.0}


def near_task_scenario(noise=None, seed=0, **extra):
    """Robot spawned at the base pose for task A, so no navigation is needed."""
    d = {"name": "near", "seed": seed, "world": {"room": {"corners": ROOM, "height": 3.0}},
         "robot": {"spawn": [7.15, 1.7, 0.0]},
         "tasks": [{"id": "A", "position": [8.0, 1.7, 1.0], "facing": [1, 0, 0]}]}
    if noise is not None:
        d["noise"] = noise
    d.update(extra)
    return scenario_from_dict(d)


def pose_at(x, y, z=1.0, yaw=0.0):
    return Pose.from_rotvec([x, y, z], [0, 0, yaw])


# ---------------------------------------------------------------------------
# mode logic
# ---------------------------------------------------------------------------

class TestModes:
    target = pose_at(5.0, 0.0)

    @pytest.mark.parametrize("base_x, tool_x, expected", [
        (0.0, 0.75, M.NAVIGATE),               # base 5 m away
        (2.9, 3.65, M.NAVIGATE),               # 2.1 m > D_nav
        (3.1, 3.85, M.WHOLE_BODY),             # inside D_nav, tool 1.15 m off
        (4.2, 4.94, M.WHOLE_BODY),             # tool 6 cm off
        (4.25, 4.96, M.HAL_SCAN),              # tool 4 cm off
        (4.25, 5.0, M.HAL_SCAN),
    ])
    def test_select_mode(self, base_x, tool_x, expected):
        assert select_mode(pose_at(tool_x, 0), self.target, pose_at(base_x, 0, 0)) == expected

    def test_defaults(self):
        assert (D_NAV, D_WB) == (2.0, 0.05)

    def test_without_base_uses_tool(self):
        assert select_mode(pose_at(2.9, 0), self.target) == M.NAVIGATE
        assert select_mode(pose_at(3.1, 0), self.target) == M.WHOLE_BODY

    def test_nominal_sequence(self):
        tr = ModeTracker(0.0)
        for k, m in enumerate([M.WHOLE_BODY, M.HAL_SCAN, M.FINE_POSITION, M.EXECUTE, M.DONE]):
            tr.go(m, k + 1.0)
        assert [m for m, _ in tr.history][0] == M.NAVIGATE
        assert tr.mode == M.DONE

    def test_failure_then_retry(self):
        tr = ModeTracker(0.0)
        tr.go(M.WHOLE_BODY, 1)
        tr.go(M.FAILED, 2)
        tr.go(M.NAVIGATE, 3)
        assert tr.mode == M.NAVIGATE

    @pytest.mark.parametrize("a, b", [(M.NAVIGATE, M.HAL_SCAN), (M.NAVIGATE, M.DONE),
                                      (M.HAL_SCAN, M.EXECUTE), (M.FAILED, M.DONE)])
    def test_illegal(self, a, b):
        tr = ModeTracker(0.0, a)
        with pytest.raises(IllegalTransition):
            tr.go(b, 1.0)


# ---------------------------------------------------------------------------
# tasks and viewpoints
# ---------------------------------------------------------------------------

class TestTasks:
    def test_wall_target_frame(self):
        p = wall_target([8, 1.7, 1.0], [1, 0, 0.3])
        R = p.rotation
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.allclose(R[:, 2], [1, 0, 0])
        assert np.allclose(R[:, 1], [0, 0, -1])
        assert np.allclose(R[:, 0], [0, -1, 0])

    def test_vertical_facing_rejected(self):
        with pytest.raises(ValueError):
            wall_target([0, 0, 1], [0, 0, 1])

    def test_grid_offsets(self):
        o = grid_offsets(3, 3, 0.05)
        assert o.shape == (9, 2)
        assert np.allclose(o.mean(axis=0), 0)
        assert np.allclose(o[0], [-0.05, 0.05])
        assert np.allclose(o[-1], [0.05, -0.05])

    def test_dot_poses_lie_on_the_wall(self):
        t = task_from_dict({"id": "A", "position": [8, 1.7, 1.0], "facing": [1, 0, 0],
                            "pattern": {"rows": 3, "cols": 3, "spacing": 0.05}})
        P = np.array([p.position for p in t.dot_poses()])
        assert np.allclose(P[:, 0], 8.0)
        assert np.allclose(sorted(set(np.round(P[:, 1], 9))), [1.65, 1.7, 1.75])
        assert np.allclose(sorted(set(np.round(P[:, 2], 9))), [0.95, 1.0, 1.05])
        # pairwise distances are those of the commanded grid
        d = pairwise_relative_errors(P)
        assert d.min() == pytest.approx(0.05)

    def test_out_of_model_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            task_from_dict({"id": "X", "position": [9, 1, 1]}, ([0, 0, 0], [8, 6, 3]))

    def test_hints_parsed(self):
        t = task_from_dict({"id": "A", "position": [8, 1.7, 1.0],
                            "hints": {"lateral": {"direction": [0, -2, 0], "max_distance": 3}}})
        (h,) = t.hints
        assert h.sensor == "lateral" and np.allclose(h.direction, [0, -1, 0])
        assert h.max_distance == 3


class TestViewpoints:
    mesh = planned_room_mesh(ROOM)
    ext = default_rangefinders()
    target = wall_target([7.9, 1.7, 1.0], [1, 0, 0])

    def test_all_rays_hit(self):
        vps = plan_hal_viewpoints(self.target, (), 6, self.mesh, self.ext)
        assert len(vps) == 6
        poses = [vp @ s for vp in vps for s in self.ext.sensors]
        o = np.array([p.position for p in poses])
        d = np.array([p.rotation[:, 0] for p in poses])
        t, _ = raycast_bruteforce(self.mesh, o, d)
        assert np.all(np.isfinite(t))
        # the six viewpoints are distinct and span all three tool axes
        P = np.array([v.position for v in vps]) - self.target.position
        assert np.linalg.matrix_rank(P, tol=1e-6) == 3

    def test_too_few_viewpoints(self):
        with pytest.raises(ValueError):
            plan_hal_viewpoints(self.target, (), 1, self.mesh, self.ext)

    def test_impossible_hint(self):
        hints = (ReferenceHint("lateral", [0, 1, 0]),)     # lateral sensor looks the other way
        with pytest.raises(ViewpointError, match="hinted"):
            plan_hal_viewpoints(self.target, hints, 6, self.mesh, self.ext)

    def test_distance_limit(self):
        hints = (ReferenceHint("lateral", [0, -1, 0], max_distance=1.0),)
        with pytest.raises(ViewpointError, match="beyond"):
            plan_hal_viewpoints(self.target, hints, 6, self.mesh, self.ext)

    def test_oblique_far_reference(self):
        mesh = planned_room_mesh([[0, 0], [8, 4], [8, 18], [0, 18]])
        target = wall_target([7.9, 15.5, 1.0], [1, 0, 0])
        (vp,) = plan_hal_viewpoints(target, (), 3, mesh, self.ext)[:1]
        lat = vp @ self.ext.sensors[1]
        t, tri = mesh.raycast(lat.position[None], lat.rotation[:, 0][None])
        assert t[0] == pytest.approx(11.5, abs=0.06)
        incidence = math.degrees(math.acos(abs(mesh.normals[tri[0]] @ lat.rotation[:, 0])))
        assert incidence == pytest.approx(math.degrees(math.atan(0.5)), abs=1e-6)


# ---------------------------------------------------------------------------
# error bookkeeping
# ---------------------------------------------------------------------------

def entry(task, dot, err, normal=(1, 0, 0), status="Done"):
    c = np.array([8.0, 1.7, 1.0])
    return TaskReport(task, dot, status, c, c + np.asarray(err, float), np.asarray(normal, float),
                      np.array([0.0, -1.0, 0.0]))


class TestReports:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(-0.1, 0.1)] * 3), min_size=0, max_size=8))
    def test_pairwise_matches_bruteforce(self, pts):
        e = np.array(pts).reshape(-1, 3)
        brute = [np.linalg.norm(a - b) for a, b in itertools.combinations(e, 2)]
        assert np.allclose(sorted(pairwise_relative_errors(e)), sorted(brute))

    def test_in_plane_error_drops_normal_component(self):
        e = entry("A", 0, [0.02, 0.003, -0.004])
        assert np.allclose(e.in_plane_error, [0, 0.003, -0.004])
        assert e.absolute_error_mm == pytest.approx(5.0)
        assert e.lateral_error_mm == pytest.approx(3.0)
        assert e.vertical_error_mm == pytest.approx(4.0)

    def test_relative_pooled_within_tasks(self):
        rep = RunReport([entry("A", 0, [0, 0.001, 0]), entry("A", 1, [0, 0.004, 0]),
                         entry("B", 0, [0, 0, 0.5]), entry("B", 1, [0, 0, 0.5]),
                         entry("B", 2, [0, 0, 0], status="Failed")])
        assert np.allclose(sorted(rep.relative_errors_mm()), [0.0, 3.0])
        assert rep.mean_relative_error_mm() == pytest.approx(1.5)
        assert len(rep.failed) == 1
        assert rep.mean_absolute_error_mm() == pytest.approx((1 + 4 + 500 + 500) / 4)

    def test_csv_roundtrip(self, tmp_path):
        rep = RunReport([entry("A", 0, [0.001, 0.002, 0.003]), entry("B", 3, [0, 0, 0], status="Failed")])
        rep.entries[0].modes = [("Navigate", 0.0), ("Done", 1.5)]
        rep.entries[1].diagnostic = "HAL rejected, bad fit"
        rep.to_csv(tmp_path / "r.csv")
        back = RunReport.from_csv(tmp_path / "r.csv")
        assert back.summary() == rep.summary()
        assert np.array_equal(back.entries[0].executed, rep.entries[0].executed)
        assert back.entries[0].modes == rep.entries[0].modes
        assert back.entries[1].diagnostic == "HAL rejected, bad fit"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ManagerConfig(hal_viewpoints=2)
        with pytest.raises(ValueError):
            ManagerConfig(control_period=0.0125)
        with pytest.raises(ValueError, match="unknown"):
            ManagerConfig.from_options({"hal_view": 6})
        cfg = ManagerConfig.from_options({"rrt": {"iterations": 50}, "random_approach": True})
        assert cfg.rrt.iterations == 50 and cfg.random_approach


# ---------------------------------------------------------------------------
# closed loop (short runs beside the task)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def zero_noise_run():
    sc = near_task_scenario(ZERO_NOISE)
    rt = Runtime(sc)
    truth_at_hal = []
    import sitebot.manager as mg
    orig = mg.hal_localize

    def spy(*a, **k):
        res = orig(*a, **k)
        truth_at_hal.append((res, rt.robot.base_pose(rt.world)))
        return res

    mg.hal_localize = spy
    try:
        (rep,) = run_task(rt, tasks_from_scenario(sc)[0])
    finally:
        mg.hal_localize = orig
    return rt, rep, truth_at_hal


class TestClosedLoop:
    def test_zero_noise_dot(self, zero_noise_run):
        rt, rep, _ = zero_noise_run
        assert rep.status == "Done", rep.diagnostic
        assert [m for m, _ in rep.modes] == ["Navigate", "WholeBodyApproach", "HalScan",
                                             "FinePosition", "Execute", "Done"]
        assert np.linalg.norm(rep.error) < 1e-3

    def test_zero_noise_hal(self, zero_noise_run):
        _, _, calls = zero_noise_run
        (res, truth), = calls
        assert res.success
        assert np.linalg.norm(res.position - truth.position) < 1e-4

    def test_logs_consistent(self, zero_noise_run):
        rt, _, _ = zero_noise_run
        est = rt.estimate_array()
        assert np.all(np.diff(est[:, 0]) > 0)
        assert len(est) == len(rt.truth.rows)
        kinds = {m.kind for m in rt.measurements}
        assert kinds == {"imu", "wheel_odometry", "pose_update"}

    def test_hal_isolated_from_estimator(self):
        """The HAL result drives the arm only: the estimator trace is the same
        with HAL on and off."""
        on, rt_on = run_scenario(near_task_scenario())
        off, rt_off = run_scenario(near_task_scenario(), hal_enabled=False)
        assert on.entries[0].status == off.entries[0].status == "Done"
        assert np.array_equal(rt_on.estimate_array(), rt_off.estimate_array())
        assert np.linalg.norm(on.entries[0].hal_correction) > 0
        assert np.all(off.entries[0].hal_correction == 0)

    def test_determinism_and_replay(self, tmp_path):
        a, rt_a = run_scenario(near_task_scenario(seed=3), tmp_path / "a")
        b, rt_b = run_scenario(near_task_scenario(seed=3), tmp_path / "b")
        assert np.array_equal(a.entries[0].executed, b.entries[0].executed)
        assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
        replayed, logged = replay_estimates(tmp_path / "a")
        assert np.array_equal(replayed, logged)
        c, _ = run_scenario(near_task_scenario(seed=4))
        assert not np.array_equal(a.entries[0].executed, c.entries[0].executed)

    def test_unreachable_task_fails_after_retry(self):
        sc = near_task_scenario(tasks=[{"id": "high", "position": [8.0, 1.7, 2.9], "facing": [1, 0, 0]}])
        rt = Runtime(sc)
        (rep,) = run_task(rt, tasks_from_scenario(sc)[0])
        assert rep.status == "Failed"
        assert rep.retries == 1
        modes = [m for m, _ in rep.modes]
        assert modes.count("Failed") == 2 and modes[-1] == "Failed"
        assert np.all(np.isnan(rep.executed))
        failures = [e for e in rt.events if e["event"] == "failure"]
        assert len(failures) == 2


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def write_scenario(path, **extra):
    d = {"name": "cli", "seed": 1, "world": {"room": {"corners": ROOM, "height": 3.0}},
         "robot": {"spawn": [7.15, 1.7, 0.0]},
         "tasks": [{"id": "A", "position": [8.0, 1.7, 1.0], "facing": [1, 0, 0]}]}
    d.update(extra)
    path.write_text(yaml.safe_dump(d))
    return path


class TestCli:
    def test_run_report_replay(self, tmp_path, capsys):
        sc = write_scenario(tmp_path / "s.yaml")
        out = tmp_path / "run"
        assert cli_main(["run", str(sc), "--seed", "2", "--noise-scale", "0.5", "-o", str(out)]) == 0
        for name in ("report.csv", "summary.txt", "measurements.jsonl", "ground_truth.csv",
                     "estimates.csv", "events.jsonl", "hal.jsonl", "config.json"):
            assert (out / name).exists(), name
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["seed"] == 2 and cfg["noise"]["lidar_sigma"] == pytest.approx(0.005)
        assert cli_main(["report", str(out)]) == 0
        assert "done: 1" in capsys.readouterr().out
        assert cli_main(["replay", str(out / "measurements.jsonl")]) == 0
        assert "identical" in capsys.readouterr().out

    def test_failed_task_exit_code(self, tmp_path):
        sc = write_scenario(tmp_path / "s.yaml", tasks=[
            {"id": "high", "position": [8.0, 1.7, 2.9], "facing": [1, 0, 0]}])
        out = tmp_path / "run"
        assert cli_main(["run", str(sc), "-o", str(out)]) == 1
        assert cli_main(["report", str(out)]) == 1

    def test_missing_file(self, tmp_path):
        assert cli_main(["run", str(tmp_path / "nope.yaml")]) == 2
