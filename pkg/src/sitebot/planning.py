"""Base navigation on a 2D log-odds occupancy grid.

Cells are indexed ``(i, j)`` along x and y; cell ``(i, j)`` spans
``origin + [i, i+1) * res`` by ``origin + [j, j+1) * res``. Unknown cells are
treated as free by the planner and the collision checker.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt

from .geometry import Pose, SurfacePointCloud, TriangleMesh, sample_surface, wrap_angle

UNKNOWN, FREE, OCCUPIED = 0, 1, 2


@dataclass
class GridConfig:
    resolution: float = 0.1
    z_min: float = 0.1
    z_max: float = 1.8
    l_occ: float = 0.85
    l_free: float = -0.4
    l_min: float = -2.0
    l_max: float = 3.5
    occupied_threshold: float = 0.0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.z_min >= self.z_max:
            raise ValueError("height band is empty")
        if not self.l_min < 0 < self.l_max:
            raise ValueError("log-odds clamp must bracket zero")


class OccupancyGrid:
    def __init__(self, origin, shape, cfg: Optional[GridConfig] = None):
        self.cfg = cfg or GridConfig()
        self.origin = np.array(origin, dtype=float).reshape(3)
        self.shape = (int(shape[0]), int(shape[1]))
        if min(self.shape) <= 0:
            raise ValueError("grid must have at least one cell")
        self.log_odds = np.zeros(self.shape)
        self.observed = np.zeros(self.shape, dtype=bool)
        self.touch()

    @property
    def resolution(self) -> float:
        return self.cfg.resolution

    @property
    def extent(self):
        lo = self.origin[:2]
        return lo, lo + np.array(self.shape) * self.resolution

    def copy(self) -> "OccupancyGrid":
        g = OccupancyGrid(self.origin, self.shape, self.cfg)
        g.log_odds = self.log_odds.copy()
        g.observed = self.observed.copy()
        return g

    def cell_of(self, xy):
        xy = np.asarray(xy, dtype=float)
        return np.floor((xy - self.origin[:2]) / self.resolution).astype(np.int64)

    def cell_center(self, ij):
        return self.origin[:2] + (np.asarray(ij, dtype=float) + 0.5) * self.resolution

    def inside(self, ij):
        ij = np.asarray(ij)
        return (ij[..., 0] >= 0) & (ij[..., 1] >= 0) & (ij[..., 0] < self.shape[0]) & (ij[..., 1] < self.shape[1])

    def states(self) -> np.ndarray:
        s = np.full(self.shape, UNKNOWN, dtype=np.int8)
        s[self.observed & (self.log_odds <= self.cfg.occupied_threshold)] = FREE
        s[self.observed & (self.log_odds > self.cfg.occupied_threshold)] = OCCUPIED
        return s

    @property
    def occupied(self) -> np.ndarray:
        # cached; call touch() after editing log_odds/observed directly
        if self._occ is None:
            self._occ = self.observed & (self.log_odds > self.cfg.occupied_threshold)
            self._any = bool(self._occ.any())
        return self._occ

    def set_occupied(self, ij, value=None):
        ij = np.atleast_2d(ij)
        self.log_odds[ij[:, 0], ij[:, 1]] = self.cfg.l_max if value is None else value
        self.observed[ij[:, 0], ij[:, 1]] = True
        self.touch()

    def clear(self, ij):
        ij = np.atleast_2d(ij)
        self.log_odds[ij[:, 0], ij[:, 1]] = self.cfg.l_min
        self.observed[ij[:, 0], ij[:, 1]] = True
        self.touch()

    def clearance(self) -> np.ndarray:
        """Distance (m) from each cell centre to the nearest occupied cell centre."""
        if self._edt is None:
            occ = self.occupied
            if self._any:
                self._edt = distance_transform_edt(~occ) * self.resolution
            else:
                self._edt = np.full(self.shape, np.inf)
        return self._edt

    def touch(self):
        self._edt = None
        self._occ = None
        self._any = False

    def any_occupied(self) -> bool:
        self.occupied
        return self._any


def grid_for_bounds(lo, hi, cfg: Optional[GridConfig] = None, margin: float = 1.0) -> OccupancyGrid:
    cfg = cfg or GridConfig()
    r = cfg.resolution
    lo = np.floor((np.asarray(lo[:2], dtype=float) - margin) / r) * r
    hi = np.ceil((np.asarray(hi[:2], dtype=float) + margin) / r) * r
    shape = np.maximum(np.round((hi - lo) / r).astype(int), 1)
    return OccupancyGrid([lo[0], lo[1], 0.0], shape, cfg)


def grid_from_mesh(mesh: TriangleMesh, cfg: Optional[GridConfig] = None, density: float = 400.0,
                   seed: int = 0, bounds=None, margin: float = 1.0) -> OccupancyGrid:
    """Mark cells holding sampled model points inside the height band.

    ``bounds`` (lo, hi) fixes the grid extent; without it the extent is the
    mesh footprint plus ``margin``. Cells without points stay unknown.
    """
    if len(mesh) == 0 and bounds is None:
        raise ValueError("empty mesh and no bounds: grid extent undefined")
    lo, hi = bounds if bounds is not None else mesh.bounds()
    grid = grid_for_bounds(lo, hi, cfg, margin)
    if len(mesh) == 0:
        return grid
    cloud = sample_surface(mesh, density, seed)
    pts = cloud.points
    band = (pts[:, 2] >= grid.cfg.z_min) & (pts[:, 2] <= grid.cfg.z_max)
    ij = grid.cell_of(pts[band, :2])
    ij = ij[grid.inside(ij)]
    if len(ij):
        ij = np.unique(ij, axis=0)
        grid.set_occupied(ij, grid.cfg.l_occ)
    return grid


def _beam_cells(grid: OccupancyGrid, a, b, t0, t1):
    """Unique cells along segments a->b restricted to parameters [t0, t1].

    Returns (beam index, flat cell index) pairs.
    """
    res = grid.resolution
    d = b - a
    length = np.linalg.norm(d[:, :2], axis=1) * (t1 - t0)
    n = np.maximum(np.ceil(length / (0.5 * res)).astype(int), 1) + 1
    total = int(n.sum())
    beam = np.repeat(np.arange(len(a)), n)
    start = np.cumsum(n) - n
    k = np.arange(total) - np.repeat(start, n)
    t = t0[beam] + (t1 - t0)[beam] * k / np.maximum(n[beam] - 1, 1)
    xy = a[beam, :2] + t[:, None] * d[beam, :2]
    ij = grid.cell_of(xy)
    ok = grid.inside(ij)
    cells = grid.shape[0] * grid.shape[1]
    key = np.unique(beam[ok].astype(np.int64) * cells + ij[ok, 0] * grid.shape[1] + ij[ok, 1])
    return key // cells, key % cells


def grid_update(grid: OccupancyGrid, scan, sensor_pose: Pose) -> OccupancyGrid:
    """Carve free space along each beam and reinforce its endpoint cell.

    ``scan`` holds points in the sensor frame (SurfacePointCloud or (n, 3)).
    Only the part of each beam inside the height band touches the grid; an
    endpoint outside the band carves without marking. Updates in place.
    """
    pts = scan.points if isinstance(scan, SurfacePointCloud) else np.asarray(scan, dtype=float).reshape(-1, 3)
    if not len(pts):
        return grid
    cfg = grid.cfg
    end = sensor_pose.transform_point(pts)
    o = np.broadcast_to(sensor_pose.position, end.shape)
    dz = end[:, 2] - o[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (cfg.z_min - o[:, 2]) / dz
        tb = (cfg.z_max - o[:, 2]) / dz
    flat_dz = np.abs(dz) < 1e-12
    inband0 = (o[:, 2] >= cfg.z_min) & (o[:, 2] <= cfg.z_max)
    t0 = np.where(flat_dz, np.where(inband0, 0.0, 1.0), np.clip(np.minimum(ta, tb), 0, 1))
    t1 = np.where(flat_dz, np.where(inband0, 1.0, 0.0), np.clip(np.maximum(ta, tb), 0, 1))
    keep = t1 > t0
    end_in = (end[:, 2] >= cfg.z_min) & (end[:, 2] <= cfg.z_max)
    end_ij = grid.cell_of(end[:, :2])
    end_ok = end_in & grid.inside(end_ij)
    end_flat = np.where(end_ok, end_ij[:, 0] * grid.shape[1] + end_ij[:, 1], -1)

    lo = grid.log_odds.reshape(-1)
    seen = grid.observed.reshape(-1)
    idx = np.flatnonzero(keep)
    if len(idx):
        beam, flat = _beam_cells(grid, o[idx], end[idx], t0[idx], t1[idx])
        not_end = flat != end_flat[idx][beam]
        np.add.at(lo, flat[not_end], cfg.l_free)
        seen[flat[not_end]] = True
    hit = end_flat[end_ok]
    np.add.at(lo, hit, cfg.l_occ)
    seen[hit] = True
    np.clip(lo, cfg.l_min, cfg.l_max, out=lo)
    grid.touch()
    return grid


# ---------------------------------------------------------------------------
# Footprint collision checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobotFootprint:
    half_length: float = 0.45
    half_width: float = 0.3
    inflation: float = 0.05

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0 or self.inflation < 0:
            raise ValueError("footprint extents must be positive")

    @property
    def extents(self):
        return np.array([self.half_length + self.inflation, self.half_width + self.inflation])

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.extents))


def _rect_hits_cells(poses, ext, centers, half):
    """Separating-axis overlap of oriented rectangles (P) with axis-aligned
    squares (K). Returns a (P, K) boolean matrix."""
    poses = np.atleast_2d(poses)
    c = np.cos(poses[:, 2])[:, None]
    s = np.sin(poses[:, 2])[:, None]
    dx = centers[None, :, 0] - poses[:, 0:1]
    dy = centers[None, :, 1] - poses[:, 1:2]
    ac, as_ = np.abs(c), np.abs(s)
    # world axes
    sep = np.abs(dx) > ext[0] * ac + ext[1] * as_ + half
    sep |= np.abs(dy) > ext[0] * as_ + ext[1] * ac + half
    # rectangle axes
    rsq = half * (ac + as_)
    sep |= np.abs(dx * c + dy * s) > ext[0] + rsq
    sep |= np.abs(-dx * s + dy * c) > ext[1] + rsq
    return ~sep


def poses_in_collision(grid: OccupancyGrid, footprint: RobotFootprint, poses) -> np.ndarray:
    """Boolean per planar pose: does the inflated footprint touch an occupied cell?"""
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    out = np.zeros(len(poses), dtype=bool)
    if not len(poses) or not grid.any_occupied():
        return out
    occ = grid.occupied
    res = grid.resolution
    R = footprint.radius
    ij = grid.cell_of(poses[:, :2])
    ins = grid.inside(ij)
    clear = np.full(len(poses), -np.inf)
    ci = np.clip(ij, 0, np.array(grid.shape) - 1)
    clear[ins] = grid.clearance()[ci[ins, 0], ci[ins, 1]]
    # clearance is centre-to-centre; allow for the pose offset inside its
    # cell and the occupied cell's half diagonal
    safe = ins & (clear - res * math.sqrt(2) > R)
    todo = np.flatnonzero(~safe)
    if not len(todo):
        return out
    P = poses[todo]
    w = R + res
    lo = grid.cell_of(P[:, :2].min(axis=0) - w)
    hi = grid.cell_of(P[:, :2].max(axis=0) + w) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, grid.shape)
    if np.any(lo >= hi):
        return out
    sub = np.argwhere(occ[lo[0]:hi[0], lo[1]:hi[1]])
    if not len(sub):
        return out
    centers = grid.cell_center(sub + lo)
    out[todo] = _rect_hits_cells(P, footprint.extents, centers, res / 2).any(axis=1)
    return out


def footprint_overlap_bruteforce(grid, footprint, pose) -> bool:
    """Reference check against every occupied cell (slow; for tests)."""
    cells = np.argwhere(grid.occupied)
    if not len(cells):
        return False
    return bool(_rect_hits_cells(np.asarray(pose, float), footprint.extents, grid.cell_center(cells),
                                 grid.resolution / 2).any())


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BaseTrajectory:
    waypoints: np.ndarray      # (M, 3) x, y, theta
    times: np.ndarray          # (M,)
    cost: float

    def __post_init__(self):
        w = np.array(self.waypoints, dtype=float).reshape(-1, 3)
        t = np.array(self.times, dtype=float).reshape(-1)
        if len(w) != len(t):
            raise ValueError("waypoints and times differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must increase")
        w.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "waypoints", w)
        object.__setattr__(self, "times", t)

    def __len__(self):
        return len(self.waypoints)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) else 0.0

    def sample(self, t) -> np.ndarray:
        """Planar pose at time ``t`` (clamped to the ends)."""
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 2) if len(self.times) > 1 else 0
        if len(self.times) == 1:
            return self.waypoints[0].copy()
        a, b = self.waypoints[k], self.waypoints[k + 1]
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        out = a + s * (b - a)
        out[2] = wrap_angle(a[2] + s * wrap_angle(b[2] - a[2]))
        return out

    def from_time(self, t0: float) -> "BaseTrajectory":
        return BaseTrajectory(self.waypoints, self.times - self.times[0] + t0, self.cost)


def path_to_trajectory(points, start_theta, goal_theta, spacing=0.1, turn_step=math.radians(3),
                       speed=0.5, turn_rate=0.5, t0=0.0) -> BaseTrajectory:
    """Straight segments with tangent heading and in-place turns at vertices."""
    points = np.asarray(points, dtype=float)
    wps = [(points[0, 0], points[0, 1], wrap_angle(start_theta))]

    def turn_to(th):
        x, y, cur = wps[-1]
        d = wrap_angle(th - cur)
        n = int(math.ceil(abs(d) / turn_step))
        for k in range(1, n + 1):
            wps.append((x, y, wrap_angle(cur + d * k / n)))

    for a, b in zip(points[:-1], points[1:]):
        seg = b - a
        L = float(np.linalg.norm(seg))
        if L < 1e-12:
            continue
        th = math.atan2(seg[1], seg[0])
        turn_to(th)
        n = int(math.ceil(L / spacing))
        for k in range(1, n + 1):
            p = a + seg * k / n
            wps.append((p[0], p[1], th))
    turn_to(goal_theta)
    w = np.array(wps)
    dt = np.maximum(np.linalg.norm(np.diff(w[:, :2], axis=0), axis=1) / speed,
                    np.abs(wrap_angle(np.diff(w[:, 2]))) / turn_rate)
    step = dt > 1e-9
    w = w[np.r_[True, step]]
    times = t0 + np.r_[0.0, np.cumsum(dt[step])]
    cost = float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))
    return BaseTrajectory(w, times, cost)


def check_trajectory(grid: OccupancyGrid, footprint: RobotFootprint, traj: BaseTrajectory,
                     start: int = 0) -> Optional[int]:
    """Index of the first waypoint (from ``start``) whose footprint hits an occupied cell."""
    if len(traj) == 0 or start >= len(traj):
        return None
    hits = poses_in_collision(grid, footprint, traj.waypoints[start:])
    k = np.flatnonzero(hits)
    return int(k[0]) + start if len(k) else None


def write_trajectory_csv(path, traj: BaseTrajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "theta"])
        for t, (x, y, th) in zip(traj.times, traj.waypoints):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(th))])


def read_trajectory_csv(path) -> BaseTrajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(v) for v in r] for r in rows])
    pts = a[:, 1:3]
    cost = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    return BaseTrajectory(a[:, 1:], a[:, 0], cost)


# ---------------------------------------------------------------------------
# RRT*
# ---------------------------------------------------------------------------

@dataclass
class RrtConfig:
    step: float = 0.3
    goal_bias: float = 0.1
    iterations: int = 2000
    radius_cap: float = 1.0
    gamma: float = 3.0
    goal_tolerance: float = 1e-9
    edge_resolution: float = 0.05
    turn_step: float = math.radians(3)
    waypoint_spacing: float = 0.1
    speed: float = 0.5
    turn_rate: float = 0.5

    def __post_init__(self):
        if self.step <= 0 or not 0 <= self.goal_bias <= 1 or self.iterations < 1:
            raise ValueError("invalid RRT* configuration")


class PlanningError(RuntimeError):
    pass


@dataclass
class PlanResult:
    trajectory: Optional[BaseTrajectory]
    success: bool
    diagnostic: str = ""
    cost_history: list = field(default_factory=list)
    nodes: int = 0


class _Tree:
    def __init__(self, cap):
        self.pos = np.zeros((cap, 2))
        self.parent = np.full(cap, -1, dtype=np.int64)
        self.cost = np.zeros(cap)
        self.children = [[] for _ in range(cap)]
        self.n = 0

    def add(self, p, parent, cost):
        k = self.n
        self.pos[k] = p
        self.parent[k] = parent
        self.cost[k] = cost
        if parent >= 0:
            self.children[parent].append(k)
        self.n += 1
        return k

    def reparent(self, k, new_parent, new_cost):
        old = self.parent[k]
        if old >= 0:
            self.children[old].remove(k)
        self.parent[k] = new_parent
        self.children[new_parent].append(k)
        delta = new_cost - self.cost[k]
        stack = [k]
        while stack:
            m = stack.pop()
            self.cost[m] += delta
            stack.extend(self.children[m])


class _Checker:
    def __init__(self, grid, footprint, cfg):
        self.grid = grid
        self.fp = footprint
        self.cfg = cfg

    def poses(self, poses):
        return not poses_in_collision(self.grid, self.fp, poses).any()

    def edge(self, a, b):
        d = b - a
        L = float(np.linalg.norm(d))
        if L == 0:
            return True
        th = math.atan2(d[1], d[0])
        n = int(math.ceil(L / self.cfg.edge_resolution))
        s = np.linspace(0, 1, n + 1)
        pts = a + s[:, None] * d
        return self.poses(np.c_[pts, np.full(n + 1, th)])

    def turn(self, p, th_from, th_to):
        d = wrap_angle(th_to - th_from)
        if abs(d) < 1e-12:
            return True
        n = int(math.ceil(abs(d) / self.cfg.turn_step))
        ths = th_from + d * np.arange(1, n + 1) / n
        return self.poses(np.c_[np.tile(p, (n, 1)), ths])


def _heading(a, b):
    return math.atan2(b[1] - a[1], b[0] - a[0])


def rrt_star_plan(grid: OccupancyGrid, footprint: RobotFootprint, start, goal,
                  cfg: Optional[RrtConfig] = None, seed: int = 0, t0: float = 0.0) -> PlanResult:
    """RRT* over (x, y) with path-length cost.

    Headings follow the path tangent with in-place turns at vertices; every
    straight edge and every turn is footprint-checked, so rewiring rechecks
    the turns it changes. The goal is a tree node, so its cost can only drop.
    """
    cfg = cfg or RrtConfig()
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    chk = _Checker(grid, footprint, cfg)
    if not chk.poses(start[None]):
        return PlanResult(None, False, "start pose in collision")
    if not chk.poses(goal[None]):
        return PlanResult(None, False, "goal pose in collision")
    rng = np.random.default_rng(seed)
    lo, hi = grid.extent
    area = float(np.prod(hi - lo))
    tree = _Tree(cfg.iterations + 2)
    tree.add(start[:2], -1, 0.0)
    goal_id = -1
    history = []

    def incoming(k):
        p = tree.parent[k]
        return start[2] if p < 0 else _heading(tree.pos[p], tree.pos[k])

    def turn_ok(k, th_out):
        if k == goal_id:
            return False
        return chk.turn(tree.pos[k], incoming(k), th_out)

    def final_ok(k, th_in):
        # turns at a node whose incoming heading becomes th_in
        if k == goal_id:
            return chk.turn(tree.pos[k], th_in, goal[2])
        return all(chk.turn(tree.pos[k], th_in, _heading(tree.pos[k], tree.pos[c]))
                   for c in tree.children[k])

    def connect(p_new, is_goal):
        near_r = max(cfg.step, min(cfg.radius_cap,
                                   cfg.gamma * math.sqrt(area / math.pi * math.log(tree.n + 1) / (tree.n + 1))))
        d = np.linalg.norm(tree.pos[:tree.n] - p_new, axis=1)
        near = [int(k) for k in np.flatnonzero(d <= near_r)]
        order = sorted((k for k in near if k != goal_id), key=lambda k: tree.cost[k] + d[k])
        parent = -1
        for k in order:
            if d[k] < 1e-12:
                continue
            th = _heading(tree.pos[k], p_new)
            if is_goal and not chk.turn(p_new, th, goal[2]):
                continue
            if turn_ok(k, th) and chk.edge(tree.pos[k], p_new):
                parent = k
                break
        if parent < 0:
            return -1, near, d
        return tree.add(p_new, parent, tree.cost[parent] + d[parent]), near, d

    def rewire(k_new, near, d):
        for m in near:
            if m == tree.parent[k_new] or d[m] < 1e-12:
                continue
            c_new = tree.cost[k_new] + d[m]
            if c_new >= tree.cost[m] - 1e-12:
                continue
            th = _heading(tree.pos[k_new], tree.pos[m])
            if not turn_ok(k_new, th) or not final_ok(m, th):
                continue
            if not chk.edge(tree.pos[k_new], tree.pos[m]):
                continue
            tree.reparent(m, k_new, c_new)

    for it in range(cfg.iterations):
        if rng.random() < cfg.goal_bias:
            sample = goal[:2].copy()
        else:
            sample = lo + rng.random(2) * (hi - lo)
        dn = np.linalg.norm(tree.pos[:tree.n] - sample, axis=1)
        if goal_id >= 0:
            dn[goal_id] = np.inf
        nearest = int(np.argmin(dn))
        gap = dn[nearest]
        if gap < 1e-12:
            history.append(tree.cost[goal_id] if goal_id >= 0 else math.inf)
            continue
        p_new = tree.pos[nearest] + (sample - tree.pos[nearest]) * min(1.0, cfg.step / gap)
        is_goal = goal_id < 0 and np.linalg.norm(p_new - goal[:2]) <= cfg.goal_tolerance
        if not is_goal and goal_id >= 0 and np.linalg.norm(p_new - goal[:2]) <= cfg.goal_tolerance:
            history.append(tree.cost[goal_id])
            continue
        k, near, d = connect(p_new, is_goal)
        if k >= 0:
            if is_goal:
                goal_id = k
            else:
                rewire(k, near, d)
        history.append(tree.cost[goal_id] if goal_id >= 0 else math.inf)

    if goal_id < 0:
        return PlanResult(None, False, f"no path within {cfg.iterations} iterations", history, tree.n)
    chain = []
    k = goal_id
    while k >= 0:
        chain.append(tree.pos[k].copy())
        k = tree.parent[k]
    pts = np.array(chain[::-1])
    traj = path_to_trajectory(pts, start[2], goal[2], cfg.waypoint_spacing, cfg.turn_step,
                              cfg.speed, cfg.turn_rate, t0)
    traj = BaseTrajectory(traj.waypoints, traj.times, float(tree.cost[goal_id]))
    hit = check_trajectory(grid, footprint, traj)
    if hit is not None:
        return PlanResult(None, False, f"resampled trajectory collides at waypoint {hit}", history, tree.n)
    return PlanResult(traj, True, "", history, tree.n)


def replan_on_collision(grid: OccupancyGrid, footprint: RobotFootprint, traj: BaseTrajectory,
                        current, goal, collision_index: Optional[int], cfg: Optional[RrtConfig] = None,
                        seed: int = 0, t0: float = 0.0) -> BaseTrajectory:
    """Plan afresh from ``current`` when a collision index lies on ``traj``."""
    if collision_index is None or collision_index >= len(traj):
        return traj
    res = rrt_star_plan(grid, footprint, current, goal, cfg, seed, t0)
    if not res.success:
        raise PlanningError(res.diagnostic)
    return res.trajectory


# ---------------------------------------------------------------------------
# Grid files
# ---------------------------------------------------------------------------

_MAGIC = "SITEBOT-GRID 1"


def save_grid(grid: OccupancyGrid, path) -> None:
    c = grid.cfg
    f = lambda *v: " ".join(repr(float(x)) for x in v)
    header = (f"{_MAGIC}\norigin {f(*grid.origin)}\n"
              f"resolution {f(c.resolution)}\ndims {grid.shape[0]} {grid.shape[1]}\n"
              f"band {f(c.z_min, c.z_max)}\nlogodds {f(c.l_occ, c.l_free, c.l_min, c.l_max)}\n"
              f"layout float64-le log_odds then uint8 observed, row-major (i along x)\nend\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grid.log_odds.astype("<f8").tobytes())
        fh.write(grid.observed.astype(np.uint8).tobytes())


def load_grid(path) -> OccupancyGrid:
    data = Path(path).read_bytes()
    end = data.index(b"\nend\n") + 5
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != _MAGIC:
        raise ValueError("not a grid file")
    kv = {ln.split()[0]: ln.split()[1:] for ln in lines[1:]}
    shape = tuple(int(v) for v in kv["dims"])
    lo = [float(v) for v in kv["logodds"]]
    cfg = GridConfig(resolution=float(kv["resolution"][0]), z_min=float(kv["band"][0]),
                     z_max=float(kv["band"][1]), l_occ=lo[0], l_free=lo[1], l_min=lo[2], l_max=lo[3])
    g = OccupancyGrid([float(v) for v in kv["origin"]], shape, cfg)
    n = shape[0] * shape[1]
    g.log_odds = np.frombuffer(data, "<f8", n, end).reshape(shape).copy()
    g.observed = np.frombuffer(data, np.uint8, n, end + 8 * n).reshape(shape).astype(bool)
    return g
