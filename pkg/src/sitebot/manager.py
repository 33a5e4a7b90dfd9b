"""Mission manager: task ingestion, distance-based mode switching and the
navigate / whole-body approach / HAL / fine positioning / mark sequence.

:class:`Runtime` couples the simulator to the estimator, planner and
controllers at a fixed control period. Everything runs on one thread and is
deterministic for a given scenario and seed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .control import (
    ControlInput9, KinematicModel, MpcCostConfig, MpcReference, WheelVelocityController,
    fk_with_base, forward_kinematics, ik_solve, mpc_solve, pose_path, quintic,
    reference_interpolate,
)
from .estimation import (
    Measurement, MheConfig, MovingHorizonEstimator, read_measurement_log, write_measurement_log,
)
from .geometry import Pose, SurfacePointCloud, TriangleMesh, quat_angle, wrap_angle
from .localization import (
    HalError, HalObservationSet, IcpConfig, RangefinderExtrinsics, append_hal_log,
    hal_localize, icp_point_to_plane,
)
from .planning import (
    BaseTrajectory, GridConfig, PlanningError, RobotFootprint, RrtConfig, check_trajectory,
    grid_from_mesh, grid_update, poses_in_collision, rrt_star_plan, save_grid,
)
from .sim import GroundTruthLog, Scenario, SensorSuite, default_rangefinders, sim_step

D_NAV = 2.0
D_WB = 0.05


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

class ManagerMode(str, Enum):
    NAVIGATE = "Navigate"
    WHOLE_BODY = "WholeBodyApproach"
    HAL_SCAN = "HalScan"
    FINE_POSITION = "FinePosition"
    EXECUTE = "Execute"
    DONE = "Done"
    FAILED = "Failed"


M = ManagerMode
LEGAL_TRANSITIONS = {
    M.NAVIGATE: {M.WHOLE_BODY, M.FAILED},
    M.WHOLE_BODY: {M.HAL_SCAN, M.FAILED},
    M.HAL_SCAN: {M.FINE_POSITION, M.FAILED},
    M.FINE_POSITION: {M.EXECUTE, M.FAILED},
    M.EXECUTE: {M.DONE, M.FAILED},
    M.FAILED: {M.NAVIGATE},
    M.DONE: set(),
}


class IllegalTransition(RuntimeError):
    pass


class ModeTracker:
    """Current mode plus the timestamped history of every mode entered."""

    def __init__(self, t: float, mode: ManagerMode = M.NAVIGATE):
        self.history = [(ManagerMode(mode), float(t))]

    @property
    def mode(self) -> ManagerMode:
        return self.history[-1][0]

    def go(self, mode: ManagerMode, t: float) -> None:
        mode = ManagerMode(mode)
        if mode not in LEGAL_TRANSITIONS[self.mode]:
            raise IllegalTransition(f"{self.mode.value} -> {mode.value}")
        self.history.append((mode, float(t)))


def select_mode(tool: Pose, target: Pose, base: Optional[Pose] = None,
                d_nav: float = D_NAV, d_wb: float = D_WB) -> ManagerMode:
    """Mode from the distance to the target tool pose.

    Far (base-to-target planar distance above ``d_nav``): navigate. Near but
    with the tool more than ``d_wb`` off: whole-body approach. Otherwise the
    HAL scan and the steps after it.
    """
    ref = base if base is not None else tool
    if float(np.linalg.norm(ref.position[:2] - target.position[:2])) > d_nav:
        return M.NAVIGATE
    if float(np.linalg.norm(tool.position - target.position)) > d_wb:
        return M.WHOLE_BODY
    return M.HAL_SCAN


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceHint:
    """Which way a rangefinder should look for its reference surface."""

    sensor: str
    direction: np.ndarray
    max_angle_deg: float = 40.0
    max_distance: float = 30.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("hint direction must be non-zero")
        d = d / n
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)


def wall_target(position, facing) -> Pose:
    """Tool pose marking a vertical wall: tool z along ``facing`` (into the
    wall, projected to horizontal), tool y down."""
    f = np.asarray(facing, dtype=float).copy()
    f[2] = 0.0
    n = np.linalg.norm(f)
    if n == 0:
        raise ValueError("facing must have a horizontal component")
    z = f / n
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, z)
    return Pose.from_rotation(position, np.column_stack([x, y, z]))


def grid_offsets(rows: int = 3, cols: int = 3, spacing: float = 0.05) -> np.ndarray:
    """Centred (lateral, vertical) offsets, row-major from the top-left."""
    if rows < 1 or cols < 1 or spacing < 0:
        raise ValueError("invalid pattern")
    u = (np.arange(cols) - (cols - 1) / 2) * spacing
    v = ((rows - 1) / 2 - np.arange(rows)) * spacing
    V, U = np.meshgrid(v, u, indexing="ij")
    return np.stack([U.ravel(), V.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class Task:
    id: str
    target: Pose
    offsets: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    hints: tuple = ()

    def __post_init__(self):
        o = np.array(self.offsets, dtype=float).reshape(-1, 2)
        if not len(o):
            raise ValueError("a task needs at least one dot")
        o.setflags(write=False)
        object.__setattr__(self, "offsets", o)
        object.__setattr__(self, "hints", tuple(self.hints))

    def dot_poses(self) -> list:
        """Tool poses of every dot: offsets along tool x and world up."""
        R = self.target.rotation
        up = -R[:, 1]
        return [Pose(self.target.position + R[:, 0] * u + up * v, self.target.orientation)
                for u, v in self.offsets]


def task_from_dict(d: dict, bounds=None) -> Task:
    pos = np.asarray(d["position"], dtype=float)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        if np.any(pos < lo - 1e-6) or np.any(pos > hi + 1e-6):
            raise ValueError(f"task {d.get('id')!r} lies outside the as-planned model")
    target = wall_target(pos, d.get("facing", (1.0, 0.0, 0.0)))
    pat = d.get("pattern")
    if pat is None:
        offsets = np.zeros((1, 2))
    elif isinstance(pat, dict):
        offsets = grid_offsets(int(pat.get("rows", 3)), int(pat.get("cols", 3)),
                               float(pat.get("spacing", 0.05)))
    else:
        offsets = np.asarray(pat, dtype=float)
    hints = []
    for name, h in (d.get("hints") or {}).items():
        h = h if isinstance(h, dict) else {"direction": h}
        hints.append(ReferenceHint(name, h["direction"], float(h.get("max_angle_deg", 40.0)),
                                   float(h.get("max_distance", 30.0))))
    return Task(str(d["id"]), target, offsets, tuple(hints))


# ---------------------------------------------------------------------------
# HAL viewpoints
# ---------------------------------------------------------------------------

class ViewpointError(RuntimeError):
    pass


def sensor_directions(pose: Pose, ext: RangefinderExtrinsics) -> list:
    return [(pose @ s).rotation[:, 0] for s in ext.sensors]


def default_hints(target: Pose, ext: RangefinderExtrinsics) -> tuple:
    return tuple(ReferenceHint(n, d) for n, d in zip(ext.names, sensor_directions(target, ext)))


def _rays_ok(vp: Pose, hints: dict, mesh: TriangleMesh, ext: RangefinderExtrinsics):
    poses = [vp @ s for s in ext.sensors]
    o = np.array([p.position for p in poses])
    d = np.array([p.rotation[:, 0] for p in poses])
    dist, tri = mesh.raycast(o, d)
    for i, name in enumerate(ext.names):
        if not np.isfinite(dist[i]):
            return False, f"{name} ray misses the model"
        h = hints.get(name)
        if h is None:
            continue
        cos_max = math.cos(math.radians(h.max_angle_deg))
        n = mesh.normals[tri[i]]
        if dist[i] > h.max_distance:
            return False, f"{name} reference beyond {h.max_distance} m"
        if float(d[i] @ h.direction) < cos_max or abs(float(n @ d[i])) < cos_max:
            return False, f"{name} ray leaves its hinted reference surface"
    return True, ""


def plan_hal_viewpoints(target: Pose, hints: Sequence[ReferenceHint] = (), count: int = 6,
                        mesh: Optional[TriangleMesh] = None,
                        ext: Optional[RangefinderExtrinsics] = None,
                        model: Optional[KinematicModel] = None, base: Optional[Pose] = None,
                        seed_joints=None, offset: float = 0.05) -> list:
    """Tool poses for the HAL scan around ``target``.

    Candidates come in triplets: the target shifted by +``offset`` along each
    tool axis, then by -``offset``, then the same at smaller scales. A
    candidate is kept when every sensor ray hits the as-planned ``mesh`` on
    its hinted surface and (with ``model`` and ``base``) IK reaches it.
    """
    if count < 3:
        raise ValueError("HAL needs at least 3 viewpoints for 3-DoF position observability")
    ext = ext or default_rangefinders()
    hint_map = {h.sensor: h for h in (hints or default_hints(target, ext))}
    axes = target.rotation
    out, why = [], []
    seed = seed_joints if seed_joints is not None else (model.default_joints if model else None)
    for scale in (1.0, 0.6, 0.2):
        for sign in (1.0, -1.0):
            for ax in range(3):
                if len(out) == count:
                    return out
                vp = Pose(target.position + sign * scale * offset * axes[:, ax], target.orientation)
                if mesh is not None:
                    ok, msg = _rays_ok(vp, hint_map, mesh, ext)
                    if not ok:
                        why.append(msg)
                        continue
                if model is not None and base is not None:
                    ik = ik_solve(model, base.inverse() @ vp, seed)
                    if not ik.success:
                        why.append("viewpoint out of reach")
                        continue
                out.append(vp)
    if len(out) < count:
        raise ViewpointError(f"only {len(out)} of {count} viewpoints feasible: "
                             + "; ".join(sorted(set(why))))
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def pairwise_relative_errors(errors) -> np.ndarray:
    """Norms of the differences between all pairs of error vectors."""
    e = np.asarray(errors, dtype=float)
    if len(e) < 2:
        return np.zeros(0)
    i, j = np.triu_indices(len(e), k=1)
    return np.linalg.norm(e[i] - e[j], axis=1)


@dataclass(eq=False)
class TaskReport:
    task_id: str
    dot: int
    status: str
    commanded: np.ndarray
    executed: np.ndarray
    normal: np.ndarray                  # tool z of the commanded pose (into the wall)
    lateral: np.ndarray                 # tool x of the commanded pose
    stage: str = ""
    diagnostic: str = ""
    modes: list = field(default_factory=list)
    retries: int = 0
    replans: int = 0
    hal_correction: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))

    @property
    def error(self) -> np.ndarray:
        return np.asarray(self.executed) - np.asarray(self.commanded)

    @property
    def in_plane_error(self) -> np.ndarray:
        """Error with the component along the wall normal removed: the
        placement error of the mark on the surface."""
        e = self.error
        n = np.asarray(self.normal)
        return e - (e @ n) * n

    @property
    def absolute_error_mm(self) -> float:
        return float(np.linalg.norm(self.in_plane_error) * 1000.0)

    @property
    def lateral_error_mm(self) -> float:
        return float(abs(self.error @ np.asarray(self.lateral)) * 1000.0)

    @property
    def vertical_error_mm(self) -> float:
        return float(abs(self.error[2]) * 1000.0)


REPORT_COLUMNS = (["task", "dot", "status", "stage"]
                  + [f"cmd_{a}" for a in "xyz"] + [f"exe_{a}" for a in "xyz"]
                  + [f"n_{a}" for a in "xyz"] + [f"l_{a}" for a in "xyz"]
                  + ["abs_err_mm", "lateral_err_mm", "vertical_err_mm", "retries", "replans"]
                  + [f"hal_d{a}" for a in "xyz"] + ["modes", "diagnostic"])


class RunReport:
    def __init__(self, entries: Sequence[TaskReport] = ()):
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    @property
    def done(self) -> list:
        return [e for e in self.entries if e.status == M.DONE.value]

    @property
    def failed(self) -> list:
        return [e for e in self.entries if e.status != M.DONE.value]

    def groups(self) -> dict:
        out: dict = {}
        for e in self.done:
            out.setdefault(e.task_id, []).append(e)
        return out

    def mean_absolute_error_mm(self) -> float:
        d = self.done
        return float(np.mean([e.absolute_error_mm for e in d])) if d else math.nan

    def relative_errors_mm(self) -> np.ndarray:
        """All within-task pairs of executed-minus-commanded offsets (in the
        wall plane), pooled over tasks."""
        parts = [pairwise_relative_errors([e.in_plane_error for e in g]) * 1000.0
                 for g in self.groups().values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def mean_relative_error_mm(self) -> float:
        r = self.relative_errors_mm()
        return float(np.mean(r)) if len(r) else math.nan

    def per_task(self) -> dict:
        out = {}
        for tid, g in self.groups().items():
            rel = pairwise_relative_errors([e.in_plane_error for e in g]) * 1000.0
            out[tid] = {
                "count": len(g),
                "absolute_mm": float(np.mean([e.absolute_error_mm for e in g])),
                "lateral_mm": float(np.mean([e.lateral_error_mm for e in g])),
                "vertical_mm": float(np.mean([e.vertical_error_mm for e in g])),
                "relative_mm": float(np.mean(rel)) if len(rel) else math.nan,
            }
        return out

    def summary(self) -> str:
        lines = [f"tasks: {len(self.entries)}  done: {len(self.done)}  failed: {len(self.failed)}",
                 f"mean absolute error: {self.mean_absolute_error_mm():.3f} mm",
                 f"mean pairwise relative error: {self.mean_relative_error_mm():.3f} mm",
                 "", f"{'task':<10}{'n':>4}{'abs mm':>10}{'lat mm':>10}{'vert mm':>10}{'rel mm':>10}"]
        for tid, s in self.per_task().items():
            lines.append(f"{tid:<10}{s['count']:>4}{s['absolute_mm']:>10.3f}{s['lateral_mm']:>10.3f}"
                         f"{s['vertical_mm']:>10.3f}{s['relative_mm']:>10.3f}")
        for e in self.failed:
            lines.append(f"FAILED {e.task_id}#{e.dot} in {e.stage}: {e.diagnostic}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for e in self.entries:
                f = lambda v: [repr(float(x)) for x in v]
                w.writerow([e.task_id, e.dot, e.status, e.stage] + f(e.commanded) + f(e.executed)
                           + f(e.normal) + f(e.lateral)
                           + [repr(e.absolute_error_mm), repr(e.lateral_error_mm),
                              repr(e.vertical_error_mm), e.retries, e.replans]
                           + f(e.hal_correction)
                           + [json.dumps([[m, t] for m, t in e.modes]), e.diagnostic])

    @classmethod
    def from_csv(cls, path) -> "RunReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = []
        for r in rows:
            v = lambda p: np.array([float(r[f"{p}_{a}"]) for a in "xyz"])
            out.append(TaskReport(r["task"], int(r["dot"]), r["status"], v("cmd"), v("exe"),
                                  v("n"), v("l"), r["stage"], r["diagnostic"],
                                  [tuple(m) for m in json.loads(r["modes"])], int(r["retries"]),
                                  int(r["replans"]),
                                  np.array([float(r[f"hal_d{a}"]) for a in "xyz"])))
        return cls(out)


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------

def _nav_mpc() -> MpcCostConfig:
    return MpcCostConfig(alpha=0, Q_j=[20.0, 20.0, 10.0] + [1.0] * 6, time_budget=math.inf)


def _wb_mpc() -> MpcCostConfig:
    return MpcCostConfig(alpha=1, time_budget=math.inf)


@dataclass(frozen=True)
class ManagerConfig:
    d_nav: float = D_NAV
    d_wb: float = D_WB
    standoff: float = 0.10               # pre-task tool pose distance from the surface
    hal_viewpoints: int = 6
    hal_offset: float = 0.05
    hal_enabled: bool = True
    control_period: float = 0.1
    icp_period: float = 0.5
    sim_rate: float = 400.0
    arm_move_time: float = 1.0
    fine_move_time: float = 1.5
    settle_time: float = 0.3
    stop_time: float = 0.5
    dwell_time: float = 0.2
    approach_staging: float = 1.5        # straight run-in before the pre-task base pose
    wb_timeout: float = 20.0
    nav_margin: float = 20.0
    random_approach: bool = False
    approach_distance: tuple = (2.5, 4.0)
    initial_pose_error: tuple = (0.05, -0.04, 0.03)
    max_hal_correction: float = 0.3
    min_hal_inliers: float = 0.5
    scan_stride: int = 3
    icp_sigma_position: float = 0.005    # pose-update weights: a few times the ICP scatter
    icp_sigma_rotation: float = 0.001
    map_density: float = 400.0
    rrt: RrtConfig = field(default_factory=lambda: RrtConfig(iterations=600))
    nav_mpc: MpcCostConfig = field(default_factory=_nav_mpc)
    wb_mpc: MpcCostConfig = field(default_factory=_wb_mpc)
    icp: IcpConfig = field(default_factory=lambda: IcpConfig(correspondence_radius=0.5,
                                                                 robust_scale=0.02))
    footprint: RobotFootprint = field(default_factory=RobotFootprint)
    plan_clearance: float = 0.15         # extra inflation while planning

    @property
    def planning_footprint(self) -> RobotFootprint:
        f = self.footprint
        return RobotFootprint(f.half_length, f.half_width, f.inflation + self.plan_clearance)

    def __post_init__(self):
        if self.hal_viewpoints < 3:
            raise ValueError("HAL needs at least 3 viewpoints")
        ticks = self.control_period * self.sim_rate
        if abs(ticks - round(ticks)) > 1e-9 or round(ticks) % 4:
            raise ValueError("control period must be a multiple of 4 simulation steps")
        if self.approach_staging <= 0:
            raise ValueError("approach staging must be positive")

    @classmethod
    def from_options(cls, options: dict) -> "ManagerConfig":
        names = {f.name for f in fields(cls)}
        plain = {k: v for k, v in (options or {}).items() if k in names and k != "rrt"}
        unknown = set(options or {}) - names
        if unknown:
            raise ValueError(f"unknown manager options: {sorted(unknown)}")
        if "approach_distance" in plain:
            plain["approach_distance"] = tuple(plain["approach_distance"])
        if "initial_pose_error" in plain:
            plain["initial_pose_error"] = tuple(plain["initial_pose_error"])
        cfg = cls(**plain)
        if "rrt" in (options or {}):
            cfg = replace(cfg, rrt=RrtConfig(**options["rrt"]))
        return cfg


class StageFailure(RuntimeError):
    def __init__(self, stage: ManagerMode, msg: str):
        super().__init__(msg)
        self.stage = stage


class Runtime:
    """Closed loop of simulator, estimator, planner and controllers.

    Time advances in control periods. At each period boundary (a knot time
    of the estimator) ICP runs when due, the estimator solves, and the active
    controller computes commands that the simulator then applies at its
    internal rate while IMU and encoder samples stream into the estimator.
    Ground truth is read only for logging and for the executed-mark record.
    """

    def __init__(self, scenario: Scenario, cfg: Optional[ManagerConfig] = None):
        self.sc = scenario
        self.cfg = cfg or ManagerConfig()
        self.world = scenario.world
        self.model = scenario.model
        self.robot = scenario.make_robot()
        self.suite = SensorSuite(self.world, self.robot, scenario.noise)
        self.rng = self.suite.rngs["scenario"]
        self.ext = scenario.believed_rangefinders
        self.lidar_mount = scenario.mounts.lidar
        c = self.cfg
        self.rate = c.sim_rate
        self.substeps = int(round(c.control_period * c.sim_rate))
        self.icp_ticks = max(1, int(round(c.icp_period / c.control_period)))
        self.step = 0
        self.tick = 0
        self.mhe_cfg = MheConfig(wheel_radius=self.model.wheel_radius,
                                 track_width=self.model.track_width,
                                 gravity=(0.0, 0.0, -self.world.gravity))
        self.mhe = MovingHorizonEstimator(self.mhe_cfg, 0.0)
        self.map_cloud = self.world.planned_cloud(c.map_density)
        self.grid = grid_from_mesh(self.world.as_planned, GridConfig())
        self.wheels = WheelVelocityController(self.model.wheel_radius, self.model.track_width)
        self.truth = GroundTruthLog()
        self.measurements: list = []
        self.estimates: list = []
        self.events: list = []
        self.hal_results: list = []
        self.state = None
        self.last_gyro = np.zeros(3)
        ex, ey, eth = c.initial_pose_error
        x, y, th = scenario.spawn
        self._guess = self.world.floor.base_pose(x + ex, y + ey, th + eth)
        self.truth.record(self.world, self.robot)
        self._estimate(first=True)

    # -- clock and estimation ----------------------------------------------
    @property
    def t(self) -> float:
        return self.step / self.rate

    def _log(self, kind, **kw):
        self.events.append({"t": self.t, "event": kind, **kw})

    def _add(self, m: Measurement):
        self.mhe.add(m)
        self.measurements.append(m)

    def _icp(self, first: bool = False):
        scan = self.suite.lidar()
        t = self.t
        if self.state is None:
            guess = self._guess
        else:
            guess, _, _ = self.mhe.propagate(t)
        init = guess @ self.lidar_mount
        sub = SurfacePointCloud(scan.points[::self.cfg.scan_stride],
                                scan.normals[::self.cfg.scan_stride], "lidar")
        icfg = replace(self.cfg.icp, correspondence_radius=1.0, max_iterations=60) if first \
            else self.cfg.icp
        res = icp_point_to_plane(sub, self.map_cloud, init, icfg)
        pose = init
        if len(res.residual_history) and res.matched_fraction >= 0.5:
            pose = res.pose
            self._add(Measurement.pose(t, pose @ self.lidar_mount.inverse(),
                                       self.cfg.icp_sigma_position, self.cfg.icp_sigma_rotation))
        else:
            self._log("icp_rejected", matched=res.matched_fraction)
        grid_update(self.grid, scan, pose)

    def _estimate(self, first: bool = False):
        if self.tick % self.icp_ticks == 0:
            self._icp(first)
        self.state = self.mhe.update(self.t)
        k = self.state.latest
        self.estimates.append((k.t, k.position.copy(), k.pose.orientation.copy(),
                               k.velocity.copy()))
        return k

    def base_estimate(self) -> Pose:
        return self.state.latest.pose

    def x9(self) -> np.ndarray:
        p = self.base_estimate()
        return np.concatenate([[p.position[0], p.position[1], p.yaw], self.robot.q])

    def tool_estimate(self) -> Pose:
        return fk_with_base(self.model, self.base_estimate(), self.robot.q)

    def _advance(self, base_cmds=((0.0, 0.0),), qdot=None, joint_targets=None):
        """One control period. ``base_cmds`` are (v, omega) pairs spread evenly
        over the period; ``joint_targets`` (callable of time) switches the arm
        to position mode."""
        n = self.substeps
        per = n // len(base_cmds)
        qd = np.zeros(6) if qdot is None else qdot
        for i in range(n):
            v, w = base_cmds[min(i // per, len(base_cmds) - 1)]
            cmd = ControlInput9(v, w, qd if not callable(qd) else qd(i // per))
            tgt = joint_targets(self.t) if joint_targets is not None else None
            sim_step(self.world, self.robot, cmd, 1.0 / self.rate, tgt)
            self.step += 1
            self.robot.t = self.t
            if self.step % 2 == 0:
                m = self.suite.imu()
                self.last_gyro = np.asarray(m.payload.gyro)
                self._add(m)
            if self.step % 4 == 0:
                self._add(self.suite.encoders())
        self.tick += 1
        self.truth.record(self.world, self.robot)
        return self._estimate()

    def _hold(self, duration: float, joint_targets=None):
        for _ in range(max(1, int(round(duration / self.cfg.control_period)))):
            self._advance(joint_targets=joint_targets)
        self.wheels.reset()

    def _measured_twist(self):
        k = self.state.latest
        v = float((k.rotation.T @ k.velocity)[0])
        w = float(self.last_gyro[2] - self.state.gyro_bias[2])
        return v, w

    def _drive(self, sol, cfg: MpcCostConfig):
        """Apply the first two MPC inputs (one control period) with the
        wheel-speed integral correction on the base twist."""
        U = sol.inputs
        vm, wm = self._measured_twist()
        dv, dw = self.wheels.correction(U[0, 0], U[0, 1], vm, wm, self.cfg.control_period)
        lim = self.model.velocity_limits
        k = max(1, int(round(self.cfg.control_period / cfg.dt)))
        cmds = tuple((float(np.clip(U[i, 0] + dv, -lim[0], lim[0])),
                      float(np.clip(U[i, 1] + dw, -lim[1], lim[1]))) for i in range(k))
        return self._advance(cmds, qdot=lambda i: U[min(i, k - 1), 2:8])

    # -- arm motions ---------------------------------------------------------
    def move_joints(self, q_goal, duration: float):
        q0 = self.robot.q.copy()
        q_goal = np.asarray(q_goal, dtype=float)
        t0 = self.t
        f = lambda t: q0 + (q_goal - q0) * quintic((t - t0) / duration)
        self._hold(duration, f)
        self._hold(self.cfg.settle_time, lambda t: q_goal)

    def move_tool(self, goal_in_base: Pose, duration: float) -> None:
        """Straight-line / SLERP tool path in the base frame tracked through
        IK at every waypoint."""
        start = fk_with_base(self.model, Pose.identity(), self.robot.q)
        path = pose_path(start, goal_in_base, duration, self.cfg.control_period)
        qs, q = [], self.robot.q.copy()
        for _, p in path:
            ik = ik_solve(self.model, p, q)
            if not ik.success:
                raise StageFailure(M.FINE_POSITION, f"IK failed along the tool path "
                                   f"(residual {ik.residual:.2e})")
            q = ik.q
            qs.append(q)
        times = np.array([s for s, _ in path]) + self.t
        qs = np.array(qs)

        def f(t):
            k = np.searchsorted(times, t, side="right") - 1
            if k >= len(times) - 1:
                return qs[-1]
            s = (t - times[k]) / (times[k + 1] - times[k])
            return qs[k] + s * (qs[k + 1] - qs[k])

        self._hold(duration, f)
        self._hold(self.cfg.settle_time, lambda t: qs[-1])

    # -- navigation ----------------------------------------------------------
    def _plan(self, goal, staging: float) -> BaseTrajectory:
        """RRT* to a staging pose behind ``goal`` plus a straight run-in.

        Plans with extra clearance first and falls back to the nominal
        footprint (start or goal inside the clearance band).
        """
        grid = self.grid.copy()
        start = self.x9()[:3]
        fwd = np.array([math.cos(goal[2]), math.sin(goal[2])])
        nominal = self.cfg.footprint
        for fp in (self.cfg.planning_footprint, nominal):
            for st in (staging, 0.5 * staging, 0.0):
                S = np.array([*(goal[:2] - st * fwd), goal[2]])
                run = np.zeros((0, 3))
                if st > 0:
                    n = int(math.ceil(st / self.cfg.rrt.waypoint_spacing))
                    run = np.array([[*(S[:2] + fwd * st * k / n), goal[2]]
                                    for k in range(1, n + 1)])
                    if np.any(poses_in_collision(grid, nominal, run)):
                        continue
                if poses_in_collision(grid, fp, np.array([start, S])).any():
                    continue
                res = None
                for rcfg in (self.cfg.rrt, replace(self.cfg.rrt, iterations=2000)):
                    res = rrt_star_plan(grid, fp, start, S, rcfg,
                                        int(self.rng.integers(2 ** 31)), self.t)
                    if res.success:
                        break
                if not res.success:
                    continue
                traj = res.trajectory
                if len(run):
                    dts = np.full(len(run), self.cfg.rrt.waypoint_spacing / self.cfg.rrt.speed)
                    times = traj.times[-1] + np.cumsum(dts)
                    traj = BaseTrajectory(np.vstack([traj.waypoints, run]),
                                          np.concatenate([traj.times, times]), traj.cost + st)
                return traj
        raise PlanningError(f"no collision-free path to ({goal[0]:.2f}, {goal[1]:.2f})")

    def follow(self, goal, done, staging: float = 0.0, timeout: Optional[float] = None):
        """Track a planned base trajectory until ``done(traj, t_rel)`` holds.

        Replans whenever a grid update puts an occupied cell on the rest of
        the trajectory. Returns the number of replans.
        """
        cfg = self.cfg
        mcfg = cfg.nav_mpc
        self.escape()
        traj = self._plan(goal, staging)
        self._log("plan", goal=[float(v) for v in goal], duration=traj.duration)
        deadline = self.t + (timeout if timeout is not None else traj.duration + cfg.nav_margin)
        replans = 0
        U = None
        joints = self.model.default_joints
        self.wheels.reset()
        while True:
            if done(traj, self.t - traj.times[0]):
                return replans
            if self.t > deadline:
                raise StageFailure(M.NAVIGATE, "navigation timed out")
            if self.tick % self.icp_ticks == 0 and self.tick > 0:
                k = int(np.searchsorted(traj.times, self.t, side="right")) - 1
                hit = check_trajectory(self.grid, cfg.footprint, traj, max(k, 0))
                if hit is not None:
                    self._log("replan", waypoint=hit)
                    replans += 1
                    traj = self._plan(goal, staging)
                    deadline = self.t + traj.duration + cfg.nav_margin
                    U = None
            x9 = self.x9()
            ref = np.array([np.concatenate([traj.sample(self.t + k * mcfg.dt), joints])
                            for k in range(mcfg.steps + 1)])
            sol = mpc_solve(self.model, x9, MpcReference(joint=ref), mcfg, U)
            U = sol.shifted(int(round(cfg.control_period / mcfg.dt)))
            self._drive(sol, mcfg)

    def escape(self, speed: float = 0.15, timeout: float = 4.0):
        """Back straight out of a footprint collision (the start of a plan
        must be free)."""
        fp = self.cfg.footprint
        t_end = self.t + timeout
        if not poses_in_collision(self.grid, fp, self.x9()[None, :3])[0]:
            return
        self._log("escape")
        for direction in (-1.0, 1.0):
            while self.t < t_end:
                self._advance(((direction * speed, 0.0),))
                if not poses_in_collision(self.grid, fp, self.x9()[None, :3])[0]:
                    self._hold(self.cfg.stop_time)
                    return
            t_end = self.t + timeout
        raise PlanningError("base stuck in an occupied footprint")

    def stop(self):
        self._hold(self.cfg.stop_time)

    def whole_body_approach(self, pretask: Pose):
        cfg = self.cfg
        mcfg = cfg.wb_mpc
        deadline = self.t + cfg.wb_timeout
        posture = np.concatenate([[0.0, 0.0, 0.0], self.model.default_joints])
        U = None
        self.wheels.reset()
        while self.t <= deadline:
            x9 = self.x9()
            tool = forward_kinematics(self.model, x9)
            dist = float(np.linalg.norm(tool.position - pretask.position))
            ang = quat_angle(tool.orientation, pretask.orientation)
            refs = MpcReference(ee=reference_interpolate(self.model, x9, pretask, mcfg),
                                posture=posture)
            sol = mpc_solve(self.model, x9, refs, mcfg, U)
            ahead = sol.states[:int(round(0.5 / mcfg.dt)) + 1, :3]
            if np.any(poses_in_collision(self.grid, cfg.footprint, ahead)):
                self.stop()
                raise StageFailure(M.WHOLE_BODY, "whole-body approach would drive the base "
                                                 "into an obstacle")
            v, w = sol.inputs[0, :2]
            if dist <= cfg.d_wb and ang < math.radians(3) and abs(v) < 0.02 and abs(w) < 0.05:
                self.stop()
                return
            U = sol.shifted(int(round(cfg.control_period / mcfg.dt)))
            self._drive(sol, mcfg)
        raise StageFailure(M.WHOLE_BODY, "whole-body approach timed out")

    # -- helpers ---------------------------------------------------------------
    def base_goal_for(self, tool: Pose) -> np.ndarray:
        """Planar base pose holding ``tool`` with the default arm posture."""
        default_tool = forward_kinematics(self.model, np.concatenate([[0, 0, 0],
                                                                      self.model.default_joints]))
        yaw = math.atan2(tool.rotation[1, 2], tool.rotation[0, 2])
        c, s = math.cos(yaw), math.sin(yaw)
        off = default_tool.position[:2]
        xy = tool.position[:2] - np.array([c * off[0] - s * off[1], s * off[0] + c * off[1]])
        return np.array([xy[0], xy[1], yaw])

    def random_start(self, goal) -> Optional[np.ndarray]:
        lo_d, hi_d = self.cfg.approach_distance
        big = RobotFootprint(self.cfg.footprint.half_length, self.cfg.footprint.half_width,
                             self.cfg.footprint.inflation + 0.25)
        for _ in range(200):
            phi = self.rng.uniform(-math.pi, math.pi)
            d = self.rng.uniform(lo_d, hi_d)
            th = self.rng.uniform(-math.pi, math.pi)
            p = np.array([goal[0] + d * math.cos(phi), goal[1] + d * math.sin(phi), th])
            ij = self.grid.cell_of(p[None, :2])
            if not self.grid.inside(ij)[0]:
                continue
            if not poses_in_collision(self.grid, big, p[None])[0] and self._inside_model(p):
                return p
        return None

    def _inside_model(self, p) -> bool:
        """Rays in four directions all hit the as-planned model."""
        o = np.array([[p[0], p[1], 0.5]] * 4)
        d = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
        t, _ = self.world.as_planned.raycast(o, d)
        return bool(np.all(np.isfinite(t)))

    def aligned(self, goal, staging: float) -> bool:
        """Base on the straight run-in line of ``goal``."""
        x9 = self.x9()
        fwd = np.array([math.cos(goal[2]), math.sin(goal[2])])
        rel = x9[:2] - goal[:2]
        along = float(rel @ fwd)
        cross = abs(float(rel @ np.array([-fwd[1], fwd[0]])))
        return (-staging - 0.5 <= along <= 0.3 and cross < 0.25
                and abs(wrap_angle(x9[2] - goal[2])) < 0.3)

    # -- logs --------------------------------------------------------------------
    def estimate_array(self) -> np.ndarray:
        return np.array([[t, *p, *q, *v] for t, p, q, v in self.estimates])

    def write(self, run_dir) -> None:
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_measurement_log(d / "measurements.jsonl", self.measurements)
        self.truth.write(d / "ground_truth.csv")
        with open(d / "estimates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz"])
            for row in self.estimate_array():
                w.writerow([repr(float(v)) for v in row])
        with open(d / "events.jsonl", "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e) + "\n")
        hal_path = d / "hal.jsonl"
        hal_path.unlink(missing_ok=True)
        for res, extra in self.hal_results:
            append_hal_log(hal_path, res, **extra)
        save_grid(self.grid, d / "grid.txt")
        config = {"scenario": self.sc.name, "source": self.sc.source,
                  "seed": self.sc.noise.seed, "noise": asdict(self.sc.noise),
                  "mhe": asdict(self.mhe_cfg), "sim_time": self.t}
        (d / "config.json").write_text(json.dumps(config, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Task execution
# ---------------------------------------------------------------------------

STAGES = (M.NAVIGATE, M.WHOLE_BODY, M.HAL_SCAN, M.FINE_POSITION, M.EXECUTE)


def _hal_stage(rt: Runtime, pretask: Pose, task: Task, dot: int):
    cfg = rt.cfg
    base = rt.base_estimate()
    try:
        vps = plan_hal_viewpoints(pretask, task.hints, cfg.hal_viewpoints, rt.world.as_planned,
                                  rt.ext, rt.model, base, rt.robot.q, cfg.hal_offset)
    except ViewpointError as exc:
        raise StageFailure(M.HAL_SCAN, str(exc)) from exc
    views, readings = [], []
    for vp in vps:
        ik = ik_solve(rt.model, base.inverse() @ vp, rt.robot.q)
        rt.move_joints(ik.q, cfg.arm_move_time)
        readings.append(rt.suite.rangefinders())
        views.append(fk_with_base(rt.model, Pose.identity(), rt.robot.q))
    if not cfg.hal_enabled:
        return base, np.zeros(3)
    obs = HalObservationSet(views, np.array(readings), base)
    try:
        res = hal_localize(obs, rt.ext, rt.world.as_planned)
    except HalError as exc:
        raise StageFailure(M.HAL_SCAN, f"HAL: {exc}") from exc
    corr = np.asarray(res.position) - base.position
    rt.hal_results.append((res, {"t": rt.t, "task": task.id, "dot": dot,
                                 "initial": [float(v) for v in base.position]}))
    rt._log("hal", task=task.id, dot=dot, correction=[float(v) for v in corr],
            inliers=res.inlier_fraction, success=res.success)
    if not res.success or res.inlier_fraction < cfg.min_hal_inliers:
        raise StageFailure(M.HAL_SCAN, f"HAL rejected: {res.diagnostic or 'too few inliers'}")
    if np.linalg.norm(corr) > cfg.max_hal_correction:
        raise StageFailure(M.HAL_SCAN, f"HAL correction {np.linalg.norm(corr):.3f} m too large")
    return Pose(res.position, base.orientation), corr


def _attempt(rt: Runtime, task: Task, dot: int, dot_pose: Pose, tracker: ModeTracker,
             entry: TaskReport, reposition: bool) -> None:
    cfg = rt.cfg
    pretask = Pose(dot_pose.position - cfg.standoff * dot_pose.rotation[:, 2],
                   dot_pose.orientation)
    goal = rt.base_goal_for(pretask)
    staging = cfg.approach_staging

    # Navigate
    if reposition:
        start = rt.random_start(goal)
        if start is not None:
            rt._log("reposition", target=[float(v) for v in start])

            def arrived(traj, t_rel):
                x = rt.x9()
                end = traj.waypoints[-1]
                return (t_rel >= traj.duration and np.linalg.norm(x[:2] - end[:2]) < 0.15
                        and abs(wrap_angle(x[2] - end[2])) < 0.2)

            entry.replans += rt.follow(start, arrived)
    mode = select_mode(rt.tool_estimate(), pretask, rt.base_estimate(), cfg.d_nav, cfg.d_wb)
    if mode == M.NAVIGATE or not rt.aligned(goal, staging):
        fwd = np.array([math.cos(goal[2]), math.sin(goal[2])])
        t_ready = []

        def near(traj, t_rel):
            if not t_ready:
                # time at which the reference has entered the run-in line
                S = goal[:2] - staging * fwd
                d = np.linalg.norm(traj.waypoints[:, :2] - S, axis=1)
                idx = np.flatnonzero(d < 1e-6)
                k = idx[-1] if len(idx) else 0
                t_ready.append(traj.times[k] - traj.times[0])
            if t_rel < t_ready[0]:
                return False
            return select_mode(rt.tool_estimate(), pretask, rt.base_estimate(),
                               cfg.d_nav, cfg.d_wb) != M.NAVIGATE

        entry.replans += rt.follow(goal, near, staging)
    tracker.go(M.WHOLE_BODY, rt.t)
    rt.whole_body_approach(pretask)
    tracker.go(M.HAL_SCAN, rt.t)
    q_pre = rt.robot.q.copy()
    base_hal, corr = _hal_stage(rt, pretask, task, dot)
    entry.hal_correction = corr
    tracker.go(M.FINE_POSITION, rt.t)
    rt.move_tool(base_hal.inverse() @ dot_pose, cfg.fine_move_time)
    tracker.go(M.EXECUTE, rt.t)
    entry.executed = rt.robot.ee_pose(rt.world).position.copy()
    rt._log("mark", task=task.id, dot=dot)
    rt._hold(cfg.dwell_time)
    try:
        rt.move_joints(q_pre, cfg.arm_move_time)
    except StageFailure as exc:
        raise StageFailure(M.EXECUTE, str(exc)) from exc
    tracker.go(M.DONE, rt.t)


def run_task(rt: Runtime, task: Task) -> list:
    """Run every dot of ``task``; one report entry per dot.

    Each stage may fail once: the attempt restarts from Navigate. A second
    failure of the same stage ends the dot as Failed.
    """
    out = []
    cfg = rt.cfg
    for dot, dot_pose in enumerate(task.dot_poses()):
        R = dot_pose.rotation
        entry = TaskReport(task.id, dot, M.FAILED.value, dot_pose.position.copy(),
                           np.full(3, np.nan), R[:, 2].copy(), R[:, 0].copy())
        tracker = ModeTracker(rt.t)
        rt._log("task", task=task.id, dot=dot)
        failures: dict = {}
        while True:
            try:
                _attempt(rt, task, dot, dot_pose, tracker, entry, cfg.random_approach)
                entry.status = M.DONE.value
                break
            except (StageFailure, PlanningError) as exc:
                stage = exc.stage if isinstance(exc, StageFailure) else M.NAVIGATE
                if isinstance(exc, StageFailure) and exc.stage != tracker.mode \
                        and tracker.mode != M.FAILED:
                    stage = tracker.mode
                entry.executed = np.full(3, np.nan)
                tracker.go(M.FAILED, rt.t)
                rt._log("failure", task=task.id, dot=dot, stage=stage.value, reason=str(exc))
                failures[stage] = failures.get(stage, 0) + 1
                rt._hold(cfg.stop_time)
                if failures[stage] > 1:
                    entry.stage, entry.diagnostic = stage.value, str(exc)
                    break
                entry.retries += 1
                tracker.go(M.NAVIGATE, rt.t)
        entry.modes = [(m.value, t) for m, t in tracker.history]
        out.append(entry)
    return out


def run_loop(rt: Runtime, tasks: Sequence[Task], cycles: int = 1) -> RunReport:
    if cycles < 1:
        raise ValueError("at least one cycle")
    report = RunReport()
    for c in range(cycles):
        for task in tasks:
            rt._log("cycle", cycle=c, task=task.id)
            report.entries.extend(run_task(rt, task))
    return report


def mhe_config_from_json(d: dict) -> MheConfig:
    return MheConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def replay_estimates(run_dir):
    """Re-run the estimator over a run's measurement log.

    Returns ``(replayed, logged)`` estimate arrays with rows
    ``t, x, y, z, qw, qx, qy, qz, vx, vy, vz``; ``logged`` is None when the
    run has no estimate trace.
    """
    d = Path(run_dir)
    cfg = mhe_config_from_json(json.loads((d / "config.json").read_text())["mhe"])
    ms = read_measurement_log(d / "measurements.jsonl")
    rows = []
    mhe = MovingHorizonEstimator(cfg, 0.0)
    ms = sorted(ms, key=lambda m: m.timestamp)
    k = 0
    n_end = mhe._knot_index(ms[-1].timestamp) if ms else -1
    for kid in range(0, n_end + 1):
        t = mhe.knot_time(kid)
        # an IMU sample is stamped at the start of its interval but only
        # available at its end: the one stamped at the knot arrives later
        while k < len(ms) and (ms[k].timestamp < t - 1e-9 or (
                ms[k].kind != "imu" and ms[k].timestamp <= t + 1e-9)):
            mhe.add(ms[k])
            k += 1
        st = mhe.update(t)
        kn = st.latest
        rows.append([kn.t, *kn.position, *kn.pose.orientation, *kn.velocity])
    logged = None
    if (d / "estimates.csv").exists():
        logged = np.loadtxt(d / "estimates.csv", delimiter=",", skiprows=1, ndmin=2)
    return np.array(rows), logged


def tasks_from_scenario(scenario: Scenario) -> list:
    bounds = scenario.world.as_planned.bounds()
    return [task_from_dict(d, bounds) for d in scenario.tasks]


def run_scenario(scenario: Scenario, run_dir=None, **overrides):
    """Load tasks, run the loop and optionally write every log to ``run_dir``.

    Returns ``(report, runtime)``.
    """
    opts = dict(scenario.options)
    opts.update(overrides)
    rt = Runtime(scenario, ManagerConfig.from_options(opts))
    report = run_loop(rt, tasks_from_scenario(scenario), scenario.cycles)
    if run_dir is not None:
        d = Path(run_dir)
        rt.write(d)
        report.to_csv(d / "report.csv")
        (d / "summary.txt").write_text(report.summary())
    return report, rt
