import math

import numpy as np
import pytest

from sitebot.geometry import Pose, TriangleMesh, box_mesh, merge_meshes, quad_mesh, sample_surface
from sitebot.planning import (
    FREE, OCCUPIED, UNKNOWN, BaseTrajectory, GridConfig, OccupancyGrid, PlanningError,
    RobotFootprint, RrtConfig, check_trajectory, footprint_overlap_bruteforce, grid_from_mesh,
    grid_update, load_grid, path_to_trajectory, poses_in_collision, read_trajectory_csv,
    replan_on_collision, rrt_star_plan, save_grid, write_trajectory_csv,
)


def free_grid(lo=(-1.0, -3.0), shape=(80, 60)):
    g = OccupancyGrid([lo[0], lo[1], 0.0], shape)
    g.clear(np.argwhere(np.ones(shape, bool)))
    return g


def wall_with_gap(gap=1.2):
    g = free_grid()
    i = int(g.cell_of([2.5, 0.0])[0])
    cells = [(i, j) for j in range(g.shape[1]) if abs(g.cell_center([i, j])[1]) > gap / 2]
    g.set_occupied(cells)
    return g


def assert_collision_free(grid, fp, traj):
    for wp in traj.waypoints:
        assert not footprint_overlap_bruteforce(grid, fp, wp)


# --- grid from mesh -------------------------------------------------------------

def test_empty_mesh_gives_unknown_grid():
    g = grid_from_mesh(TriangleMesh.empty(), bounds=([0, 0, 0], [2, 2, 2]))
    assert np.all(g.states() == UNKNOWN)
    with pytest.raises(ValueError):
        grid_from_mesh(TriangleMesh.empty())


def test_single_wall_column():
    wall = quad_mesh([2, -1, 0], [2, 1, 0], [2, 1, 2], [2, -1, 2])
    g = grid_from_mesh(wall, margin=1.0)
    occ = np.argwhere(g.states() == OCCUPIED)
    assert len(occ)
    xs = g.cell_center(occ)[:, 0]
    assert np.all(np.abs(xs - 2.0) <= g.resolution)
    assert np.all(g.states()[g.states() != OCCUPIED] == UNKNOWN)
    ys = g.cell_center(occ)[:, 1]
    assert ys.min() < -0.85 and ys.max() > 0.85


def test_room_grid_matches_point_binning():
    room = box_mesh([0, 0, 0], [4, 3, 2.5], inward=True)
    pillar = box_mesh([1.5, 1.0, 0], [1.8, 1.3, 2.5])
    mesh = merge_meshes([room, pillar])
    g = grid_from_mesh(mesh, density=300, seed=4)
    cloud = sample_surface(mesh, 300, 4)
    expected = set()
    for p in cloud.points:
        if 0.1 <= p[2] <= 1.8:
            expected.add((int(math.floor((p[0] - g.origin[0]) / 0.1)),
                          int(math.floor((p[1] - g.origin[1]) / 0.1))))
    got = {tuple(ij) for ij in np.argwhere(g.states() == OCCUPIED)}
    assert got == expected


# --- grid updates -------------------------------------------------------------------

def test_beam_carves_previously_occupied_cell():
    g = OccupancyGrid([0, 0, 0], (50, 10))
    g.set_occupied([[20, 5]], 0.85)
    before = g.log_odds[20, 5]
    sensor = Pose.translation(0.05, 0.55, 1.0)
    grid_update(g, np.array([[4.0, 0.0, 0.0]]), sensor)
    assert g.log_odds[20, 5] < before
    end = g.cell_of([4.05, 0.55])
    assert g.log_odds[end[0], end[1]] == pytest.approx(0.85)


def test_endpoint_saturates():
    g = OccupancyGrid([0, 0, 0], (50, 10))
    sensor = Pose.translation(0.05, 0.55, 1.0)
    for _ in range(20):
        grid_update(g, np.array([[3.0, 0.0, 0.0]]), sensor)
    end = g.cell_of([3.05, 0.55])
    assert g.log_odds[end[0], end[1]] == g.cfg.l_max
    assert g.log_odds.min() == g.cfg.l_min


def test_update_order_independent_for_disjoint_beams():
    sensor = Pose.translation(2.05, 2.05, 1.0)
    a = np.array([[1.5, 0.0, 0.0], [0.0, 1.2, 0.0]])
    b = np.array([[-1.3, 0.0, 0.0], [0.0, -1.6, 0.0]])
    g1 = OccupancyGrid([0, 0, 0], (40, 40))
    g2 = g1.copy()
    grid_update(grid_update(g1, a, sensor), b, sensor)
    grid_update(grid_update(g2, b, sensor), a, sensor)
    assert np.array_equal(g1.log_odds, g2.log_odds)
    assert np.array_equal(g1.observed, g2.observed)


def test_floor_hits_carve_band_only():
    g = OccupancyGrid([0, 0, 0], (60, 10))
    sensor = Pose.translation(0.05, 0.55, 1.0)
    # beam descending to the floor 4 m ahead; it leaves the band at z = 0.1
    grid_update(g, np.array([[4.0, 0.0, -1.0]]), sensor)
    leave_x = 0.05 + 4.0 * 0.9
    row = g.log_odds[:, 5]
    assert np.all(row[:int(leave_x / 0.1) - 1] < 0)
    assert np.all(row[int(leave_x / 0.1) + 1:] == 0)
    assert not g.occupied.any()


def ring_scan(mesh, sensor: Pose, rings=16, beams=360):
    el = np.radians(np.linspace(-15, 15, rings))
    az = np.linspace(-math.pi, math.pi, beams, endpoint=False)
    E, A = np.meshgrid(el, az)
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)
    t, _ = mesh.raycast(np.tile(sensor.position, (len(d), 1)), sensor.transform_vector(d), 20.0)
    ok = np.isfinite(t)
    return d[ok] * t[ok, None]


def test_new_box_obstacle_detected_within_three_scans():
    room = box_mesh([0, 0, 0], [6, 4, 2.5], inward=True)
    g = grid_from_mesh(room)
    obstacle = box_mesh([3.0, 1.5, 0.0], [3.4, 1.9, 0.8])
    world = merge_meshes([room, obstacle])
    sensor = Pose.translation(1.0, 2.0, 0.6)
    cells = {tuple(c) for c in g.cell_of(np.array([[3.05, 1.55], [3.05, 1.85], [3.15, 1.65]]))}
    for k in range(3):
        grid_update(g, ring_scan(world, sensor), sensor)
    occ = g.occupied
    assert any(occ[i, j] for i, j in cells)
    face = g.cell_of([3.0, 1.7])
    assert occ[face[0], face[1]] or occ[face[0] - 1, face[1]]


# --- collision checks ------------------------------------------------------------------

def test_unknown_cells_never_collide():
    g = OccupancyGrid([0, 0, 0], (30, 30))
    fp = RobotFootprint()
    rng = np.random.default_rng(0)
    poses = np.c_[rng.uniform(0, 3, (50, 2)), rng.uniform(-3, 3, 50)]
    assert not poses_in_collision(g, fp, poses).any()


def test_fast_check_matches_bruteforce():
    rng = np.random.default_rng(1)
    g = free_grid((0, 0), (50, 50))
    g.set_occupied(rng.integers(0, 50, (60, 2)))
    fp = RobotFootprint()
    poses = np.c_[rng.uniform(0, 5, (400, 2)), rng.uniform(-3, 3, 400)]
    fast = poses_in_collision(g, fp, poses)
    slow = np.array([footprint_overlap_bruteforce(g, fp, p) for p in poses])
    assert np.array_equal(fast, slow)
    assert fast.any() and not fast.all()


def spaced_trajectory():
    wps = np.array([[k * 2.0, 0.0, 0.0] for k in range(10)])
    return BaseTrajectory(wps, np.arange(10.0), 18.0)


def test_check_trajectory_cases():
    fp = RobotFootprint()
    traj = spaced_trajectory()
    g = free_grid((-1, -3), (230, 60))
    assert check_trajectory(g, fp, traj) is None
    g.set_occupied([g.cell_of([14.3, 0.1])])
    idx = check_trajectory(g, fp, traj)
    oracle = next(k for k, wp in enumerate(traj.waypoints) if footprint_overlap_bruteforce(g, fp, wp))
    assert idx == oracle == 7
    g2 = free_grid((-1, -3), (230, 60))
    g2.set_occupied([g2.cell_of([15.0, 2.0])])
    assert check_trajectory(g2, fp, traj) is None


def test_footprint_validation():
    with pytest.raises(ValueError):
        RobotFootprint(0.0, 0.3)


# --- RRT* -------------------------------------------------------------------------------

def test_free_space_near_straight():
    g = free_grid()
    res = rrt_star_plan(g, RobotFootprint(), [0, 0, 0], [5, 0, 0], seed=0)
    assert res.success
    assert res.trajectory.cost <= 5.0 * 1.05
    wp = res.trajectory.waypoints
    assert np.allclose(wp[0], [0, 0, 0]) and np.allclose(wp[-1], [5, 0, 0])


def test_trajectory_invariants():
    g = free_grid()
    cfg = RrtConfig()
    traj = rrt_star_plan(g, RobotFootprint(), [0, -1, 1.0], [5, 1, -2.0], cfg, seed=3).trajectory
    assert np.all(np.diff(traj.times) > 0)
    steps = np.linalg.norm(np.diff(traj.waypoints[:, :2], axis=0), axis=1)
    assert steps.max() <= cfg.step + 1e-12
    assert np.allclose(traj.sample(traj.times[-1]), traj.waypoints[-1])
    mid = traj.sample(0.5 * (traj.times[3] + traj.times[4]))
    assert np.allclose(mid[:2], 0.5 * (traj.waypoints[3, :2] + traj.waypoints[4, :2]))


def test_passes_through_gap():
    g = wall_with_gap(1.2)
    fp = RobotFootprint(half_length=0.45, half_width=0.4)
    res = rrt_star_plan(g, fp, [0, -1.5, 0], [5, 1.5, 0], seed=0)
    assert res.success
    wp = res.trajectory.waypoints
    crossing = wp[np.argmin(np.abs(wp[:, 0] - 2.55))]
    assert abs(crossing[1]) < 0.6
    assert_collision_free(g, fp, res.trajectory)


def test_goal_in_occupied_cell_fails():
    g = free_grid()
    g.set_occupied([g.cell_of([4.0, 0.0])])
    res = rrt_star_plan(g, RobotFootprint(), [0, 0, 0], [4.0, 0.0, 0.0], seed=0)
    assert not res.success and "goal" in res.diagnostic


def test_deterministic_per_seed():
    g = wall_with_gap()
    a = rrt_star_plan(g, RobotFootprint(), [0, -1.5, 0], [5, 1.5, 0], RrtConfig(iterations=400), seed=7)
    b = rrt_star_plan(g, RobotFootprint(), [0, -1.5, 0], [5, 1.5, 0], RrtConfig(iterations=400), seed=7)
    assert np.array_equal(a.trajectory.waypoints, b.trajectory.waypoints)


def test_anytime_cost_monotone():
    g = wall_with_gap()
    fp = RobotFootprint()
    for seed in range(10):
        k = rrt_star_plan(g, fp, [0, -1.5, 0], [5, 1.5, 0], RrtConfig(iterations=300), seed=seed)
        k2 = rrt_star_plan(g, fp, [0, -1.5, 0], [5, 1.5, 0], RrtConfig(iterations=600), seed=seed)
        if k.success:
            assert k2.success and k2.trajectory.cost <= k.trajectory.cost + 1e-12
        h = np.array(k2.cost_history)
        assert np.all(np.diff(h[np.isfinite(h)]) <= 1e-12)


def random_world(rng):
    g = free_grid((0, 0), (60, 60))
    for _ in range(rng.integers(3, 9)):
        c = rng.integers(0, 60, 2)
        size = rng.integers(1, 8, 2)
        block = np.argwhere(np.ones(size, bool)) + c
        block = block[(block < 60).all(axis=1)]
        g.set_occupied(block)
    return g


@pytest.mark.slow
def test_random_worlds_no_collisions():
    rng = np.random.default_rng(2024)
    fp = RobotFootprint()
    cfg = RrtConfig(iterations=400)
    done = 0
    successes = 0
    while done < 100:
        g = random_world(rng)
        start = np.r_[rng.uniform(0.6, 5.4, 2), rng.uniform(-math.pi, math.pi)]
        goal = np.r_[rng.uniform(0.6, 5.4, 2), rng.uniform(-math.pi, math.pi)]
        if poses_in_collision(g, fp, np.vstack([start, goal])).any():
            continue
        done += 1
        res = rrt_star_plan(g, fp, start, goal, cfg, seed=done)
        if res.success:
            successes += 1
            assert check_trajectory(g, fp, res.trajectory) is None
            assert_collision_free(g, fp, res.trajectory)
    assert successes >= 60


# --- replanning -----------------------------------------------------------------------------

def test_replan_noop_cases():
    g = free_grid()
    fp = RobotFootprint()
    traj = rrt_star_plan(g, fp, [0, 0, 0], [5, 0, 0], RrtConfig(iterations=300)).trajectory
    assert replan_on_collision(g, fp, traj, [0, 0, 0], [5, 0, 0], None) is traj
    assert replan_on_collision(g, fp, traj, [0, 0, 0], [5, 0, 0], len(traj) + 3) is traj


def test_replan_avoids_new_obstacle():
    g = free_grid()
    fp = RobotFootprint()
    traj = rrt_star_plan(g, fp, [0, 0, 0], [5, 0, 0], RrtConfig(iterations=300)).trajectory
    live = g.copy()
    live.set_occupied(np.argwhere(np.ones((4, 4), bool)) + live.cell_of([2.3, -0.2]))
    idx = check_trajectory(live, fp, traj)
    assert idx is not None
    snapshot = live.copy()
    new = replan_on_collision(snapshot, fp, traj, [0, 0, 0], [5, 0, 0], idx, seed=1)
    assert new is not traj
    assert check_trajectory(live, fp, new) is None
    # obstacle removed while planning: the plan made against the snapshot stays valid
    live.clear(np.argwhere(live.occupied))
    assert check_trajectory(live, fp, new) is None


def test_replan_failure_raises():
    g = free_grid()
    fp = RobotFootprint()
    traj = rrt_star_plan(g, fp, [0, 0, 0], [5, 0, 0], RrtConfig(iterations=300)).trajectory
    g.set_occupied([g.cell_of([5.0, 0.0])])
    with pytest.raises(PlanningError):
        replan_on_collision(g, fp, traj, [0, 0, 0], [5, 0, 0], 0)


# --- files -------------------------------------------------------------------------------------

def test_grid_roundtrip(tmp_path):
    g = wall_with_gap()
    grid_update(g, np.array([[1.0, 0.3, 0.0]]), Pose.translation(0.5, 0.5, 1.0))
    save_grid(g, tmp_path / "g.grid")
    h = load_grid(tmp_path / "g.grid")
    assert np.array_equal(h.log_odds, g.log_odds)
    assert np.array_equal(h.observed, g.observed)
    assert np.array_equal(h.origin, g.origin) and h.shape == g.shape
    head = (tmp_path / "g.grid").read_bytes()[:200].decode("ascii", "replace")
    assert "resolution 0.1" in head and "dims 80 60" in head


def test_trajectory_csv_roundtrip(tmp_path):
    traj = path_to_trajectory([[0, 0], [1, 0], [1, 1]], 0.0, 1.0)
    write_trajectory_csv(tmp_path / "t.csv", traj)
    back = read_trajectory_csv(tmp_path / "t.csv")
    assert np.array_equal(back.waypoints, traj.waypoints)
    assert np.array_equal(back.times, traj.times)
    assert back.cost == pytest.approx(2.0)


def test_grid_config_validation():
    with pytest.raises(ValueError):
        GridConfig(resolution=0)
    with pytest.raises(ValueError):
        GridConfig(z_min=2.0, z_max=1.0)
