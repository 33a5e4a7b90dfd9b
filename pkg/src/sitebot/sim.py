"""Deterministic kinematic simulation of the robot, the site and its sensors.

The world holds two meshes: the as-built mesh that sensors see, and the
as-planned mesh that localization and planning are given. Ground truth lives
in :class:`SimRobot` and only leaves it through the ``simulate_*`` sensors.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .control import (
    ControlInput9, KinematicModel, RobotState9, base_velocity_to_wheels, fk_with_base,
    model_from_dict,
)
from .estimation import Measurement
from .geometry import (
    Pose, SurfacePointCloud, TriangleMesh, box_mesh, load_mesh, merge_meshes, quad_mesh,
    quat_from_rotvec, sample_surface, so3_exp, so3_log, wrap_angle,
)
from .localization import RangefinderExtrinsics

SIM_RATE = 400.0
IMU_RATE = 200.0
ENCODER_RATE = 100.0
LIDAR_RATE = 10.0
GRAVITY = 9.81


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    rangefinder_sigma: float = 0.001
    lidar_sigma: float = 0.01
    gyro_noise_density: float = 1e-3          # rad/s/sqrt(Hz)
    accel_noise_density: float = 1e-2         # m/s^2/sqrt(Hz)
    gyro_bias: tuple = (5e-4, -3e-4, 2e-4)
    accel_bias: tuple = (0.02, -0.01, 0.015)
    encoder_sigma: float = 0.02               # rad/s per sample
    slip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        sig = [self.rangefinder_sigma, self.lidar_sigma, self.gyro_noise_density,
               self.accel_noise_density, self.encoder_sigma]
        if min(sig) < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if not self.slip > 0:
            raise ValueError("slip factor must be positive")
        object.__setattr__(self, "gyro_bias", tuple(float(b) for b in self.gyro_bias))
        object.__setattr__(self, "accel_bias", tuple(float(b) for b in self.accel_bias))
        if len(self.gyro_bias) != 3 or len(self.accel_bias) != 3:
            raise ValueError("IMU biases are 3-vectors")

    def scaled(self, k: float) -> "NoiseConfig":
        """All noise levels and biases multiplied by ``k`` (slip untouched)."""
        if k < 0:
            raise ValueError("noise scale must be >= 0")
        return replace(self, rangefinder_sigma=self.rangefinder_sigma * k,
                       lidar_sigma=self.lidar_sigma * k,
                       gyro_noise_density=self.gyro_noise_density * k,
                       accel_noise_density=self.accel_noise_density * k,
                       gyro_bias=tuple(b * k for b in self.gyro_bias),
                       accel_bias=tuple(b * k for b in self.accel_bias),
                       encoder_sigma=self.encoder_sigma * k)

    def streams(self) -> dict:
        """Independent generators per sensor, all derived from ``seed``."""
        names = ("rangefinder", "lidar", "imu", "encoders", "scenario")
        kids = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: np.random.default_rng(s) for n, s in zip(names, kids)}


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FloorPlane:
    """Floor as a rigid transform of the z = 0 plane.

    ``rotvec`` tilts the floor about ``pivot`` (x, y). The robot's planar
    coordinates live in this plane.
    """

    rotvec: tuple = (0.0, 0.0, 0.0)
    pivot: tuple = (0.0, 0.0)

    @classmethod
    def tilted(cls, degrees: float, axis=(0.0, 1.0, 0.0), pivot=(0.0, 0.0)) -> "FloorPlane":
        a = np.asarray(axis, dtype=float)
        a = a / np.linalg.norm(a)
        return cls(tuple(a * math.radians(degrees)), tuple(pivot))

    @property
    def pose(self) -> Pose:
        c = np.array([self.pivot[0], self.pivot[1], 0.0])
        R = so3_exp(self.rotvec)
        return Pose.from_rotation(c - R @ c, R)

    def base_pose(self, x: float, y: float, theta: float) -> Pose:
        return self.pose @ Pose.from_planar(x, y, theta)

    def mesh(self, lo, hi, name: str = "floor") -> TriangleMesh:
        (x0, y0), (x1, y1) = lo, hi
        m = quad_mesh([x0, y0, 0], [x1, y0, 0], [x1, y1, 0], [x0, y1, 0], name)
        return m.transformed(self.pose)


def offset_wall(corners, index: int, distance: float) -> np.ndarray:
    """Move wall ``index`` (edge corners[i] -> corners[i+1]) along its inward
    normal by ``distance``; the neighbouring corners slide along their walls."""
    c = np.asarray(corners, dtype=float)
    n = len(c)
    if not 0 <= index < n:
        raise ValueError("wall index out of range")
    a, b = c[index], c[(index + 1) % n]
    e = (b - a) / np.linalg.norm(b - a)
    inward = np.array([-e[1], e[0]]) * (1.0 if _ccw(c) else -1.0)
    a2, b2 = a + distance * inward, b + distance * inward
    out = c.copy()
    prev_a = c[index - 1]
    next_b = c[(index + 2) % n]
    out[index] = _line_intersection(prev_a, a, a2, b2)
    out[(index + 1) % n] = _line_intersection(b, next_b, a2, b2)
    return out


def _ccw(c) -> bool:
    x, y = c[:, 0], c[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)) > 0


def _line_intersection(p0, p1, q0, q1):
    d1, d2 = p1 - p0, q1 - q0
    A = np.array([d1, -d2]).T
    s = np.linalg.solve(A, q0 - p0)
    return p0 + s[0] * d1


def room_mesh(corners, height: float = 3.0, floor: Optional[FloorPlane] = None,
              wall_bottom: float = -0.5, margin: float = 1.0, name: str = "room") -> TriangleMesh:
    """Vertical walls along a closed polygon plus a (possibly tilted) floor.

    Walls reach below z = 0 so a tilted floor still meets them; the floor
    quad extends ``margin`` beyond the polygon.
    """
    c = np.asarray(corners, dtype=float)
    if c.ndim != 2 or c.shape[1] != 2 or len(c) < 3:
        raise ValueError("room corners must be (N>=3, 2)")
    if not _ccw(c):
        c = c[::-1]
    walls = []
    for i in range(len(c)):
        a, b = c[i], c[(i + 1) % len(c)]
        # counter-clockwise polygon: the room lies left of a->b
        walls.append(quad_mesh([b[0], b[1], wall_bottom], [a[0], a[1], wall_bottom],
                               [a[0], a[1], height], [b[0], b[1], height], f"wall{i}"))
    lo, hi = c.min(axis=0) - margin, c.max(axis=0) + margin
    walls.append((floor or FloorPlane()).mesh(lo, hi))
    return merge_meshes(walls, name)


def _convex(c) -> bool:
    d = np.roll(c, -1, axis=0) - c
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    return bool(np.all(cross > -1e-12) or np.all(cross < 1e-12))


def planned_room_mesh(corners, height: float = 3.0, name: str = "room") -> TriangleMesh:
    """Room model holding only visible surfaces: walls from the floor up and
    a floor bounded by a convex polygon (bounding box otherwise).

    Hidden surfaces below or outside the room would give scan matching
    false attractors.
    """
    c = np.asarray(corners, dtype=float)
    if c.ndim != 2 or c.shape[1] != 2 or len(c) < 3:
        raise ValueError("room corners must be (N>=3, 2)")
    if not _ccw(c):
        c = c[::-1]
    if not _convex(c):
        return room_mesh(c, height, None, 0.0, 0.0, name)
    walls = room_mesh(c, height, None, 0.0, 0.0, name)
    keep = [i for i in range(len(walls.triangles))
            if not np.allclose(walls.normals[i], [0, 0, 1])]
    v3 = np.column_stack([c, np.zeros(len(c))])
    fan = [[0, i, i + 1] for i in range(1, len(c) - 1)]
    floor = TriangleMesh(v3, fan, "floor")
    return merge_meshes([TriangleMesh(walls.vertices, walls.triangles[keep], name), floor], name)


@dataclass(frozen=True, eq=False)
class Obstacle:
    mesh: TriangleMesh
    spawn_time: float = 0.0
    despawn_time: float = math.inf

    def active(self, t: float) -> bool:
        return self.spawn_time <= t < self.despawn_time


class SimWorld:
    """As-built reality, the as-planned model, and scripted obstacles.

    Obstacles only ever appear in the sensed (as-built) mesh.
    """

    def __init__(self, as_built: TriangleMesh, as_planned: TriangleMesh,
                 obstacles: Sequence[Obstacle] = (), gravity: float = GRAVITY,
                 floor: Optional[FloorPlane] = None):
        for m in (as_built, as_planned):
            if not isinstance(m, TriangleMesh):
                raise TypeError("world meshes must be TriangleMesh instances")
        if len(as_planned) == 0:
            raise ValueError("the as-planned mesh must not be empty")
        self.as_built = as_built
        self.as_planned = as_planned
        self.obstacles = tuple(obstacles)
        self.gravity = float(gravity)
        self.floor = floor or FloorPlane()
        self._cache: dict = {}
        self._cloud = None

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])

    def active_obstacles(self, t: float) -> tuple:
        return tuple(i for i, o in enumerate(self.obstacles) if o.active(t))

    def sensed_mesh(self, t: float = 0.0) -> TriangleMesh:
        key = self.active_obstacles(t)
        mesh = self._cache.get(key)
        if mesh is None:
            parts = [self.as_built] + [self.obstacles[i].mesh for i in key]
            mesh = self.as_built if not key else merge_meshes(parts, "as_built+obstacles")
            self._cache[key] = mesh
        return mesh

    def planned_cloud(self, density: float = 400.0, seed: int = 0) -> SurfacePointCloud:
        """Surface samples of the as-planned mesh used as the ICP map."""
        if self._cloud is None or self._cloud[0] != (density, seed):
            self._cloud = ((density, seed), sample_surface(self.as_planned, density, seed))
        return self._cloud[1]


def _mesh_of(world, t: float) -> TriangleMesh:
    return world.sensed_mesh(t) if isinstance(world, SimWorld) else world


# ---------------------------------------------------------------------------
# Robot
# ---------------------------------------------------------------------------

def default_rangefinders() -> RangefinderExtrinsics:
    """Three orthogonal distance sensors on the tool: along tool +z (front),
    tool +x (lateral) and tool +y (down in the default posture)."""
    front = Pose.from_rotvec([0.04, 0.02, -0.03], [0.0, -math.pi / 2, 0.0])
    lateral = Pose.from_rotvec([0.05, 0.0, -0.03], [0.0, 0.0, 0.0])
    down = Pose.from_rotvec([0.0, 0.05, -0.03], [0.0, 0.0, math.pi / 2])
    return RangefinderExtrinsics((front, lateral, down), ("front", "lateral", "down"))


def head_rotated(ext: RangefinderExtrinsics, rotvec) -> RangefinderExtrinsics:
    """The whole sensor head rotated by ``rotvec`` about the tool origin."""
    d = Pose([0, 0, 0], quat_from_rotvec(rotvec))
    return RangefinderExtrinsics(tuple(d @ s for s in ext.sensors), ext.names)


@dataclass(frozen=True, eq=False)
class SensorMounts:
    lidar: Pose = field(default_factory=lambda: Pose.translation(-0.1, 0.0, 0.9))
    imu: Pose = field(default_factory=Pose.identity)
    rangefinders: RangefinderExtrinsics = field(default_factory=default_rangefinders)


class SimRobot:
    """Ground truth of the mobile manipulator.

    The base state is planar in floor coordinates; :meth:`base_pose` lifts it
    onto the (possibly tilted) floor. Wheel and joint rates follow their
    commands through first-order lags; ``slip`` scales the base motion the
    wheels produce.
    """

    def __init__(self, model: KinematicModel, state: RobotState9,
                 mounts: Optional[SensorMounts] = None, base_lag: float = 0.05,
                 joint_lag: float = 0.02, slip: float = 1.0, t: float = 0.0):
        if base_lag < 0 or joint_lag < 0:
            raise ValueError("lag constants must be >= 0")
        if slip <= 0:
            raise ValueError("slip must be positive")
        self.model = model
        self.x, self.y, self.theta = float(state.x), float(state.y), float(state.theta)
        self.q = np.array(state.q, dtype=float)
        self.mounts = mounts or SensorMounts()
        self.base_lag = float(base_lag)
        self.joint_lag = float(joint_lag)
        self.slip = float(slip)
        self.t = float(t)
        self.wheel_rates = np.zeros(2)
        self.wheel_angles = np.zeros(2)
        self.joint_rates = np.zeros(6)

    @property
    def state(self) -> RobotState9:
        return RobotState9(self.x, self.y, self.theta, self.q)

    def twist(self) -> tuple:
        """Actual body-frame (v, omega), slip included."""
        r, b = self.model.wheel_radius, self.model.track_width
        wl, wr = self.wheel_rates
        return (self.slip * r * (wl + wr) / 2.0, self.slip * r * (wr - wl) / b)

    def base_pose(self, world: Optional[SimWorld] = None) -> Pose:
        floor = world.floor if world is not None else FloorPlane()
        return floor.base_pose(self.x, self.y, self.theta)

    def base_velocity(self, world: Optional[SimWorld] = None) -> np.ndarray:
        """World-frame linear velocity of the base origin."""
        v, _ = self.twist()
        R = self.base_pose(world).rotation
        return R @ np.array([v, 0.0, 0.0])

    def ee_pose(self, world: Optional[SimWorld] = None) -> Pose:
        return fk_with_base(self.model, self.base_pose(world), self.q)

    def lidar_pose(self, world: Optional[SimWorld] = None) -> Pose:
        return self.base_pose(world) @ self.mounts.lidar

    def rangefinder_poses(self, world: Optional[SimWorld] = None) -> list:
        ee = self.ee_pose(world)
        return [ee @ s for s in self.mounts.rangefinders.sensors]


def _lag(x0, target, tau, dt):
    """Exact first-order response over ``dt``: (end value, mean value)."""
    if tau <= 0:
        return target.copy(), target.copy()
    a = math.exp(-dt / tau)
    end = target + (x0 - target) * a
    mean = target + (x0 - target) * tau * (1.0 - a) / dt
    return end, mean


def sim_step(world: Optional[SimWorld], robot: SimRobot, command: ControlInput9, dt: float,
             joint_targets=None) -> SimRobot:
    """Advance ``robot`` by ``dt`` under ``command`` (in place; returned).

    Wheel and joint rates relax toward the command with their lag constants;
    the base moves along the exact arc of the mean twist over the step. With
    ``joint_targets`` the arm runs in position mode instead: each joint
    relaxes toward its target with the joint lag.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = robot.model
    ref = np.array(base_velocity_to_wheels(command.v, command.omega, m.wheel_radius,
                                           m.track_width))
    end, mean = _lag(robot.wheel_rates, ref, robot.base_lag, dt)
    r, b = m.wheel_radius, m.track_width
    v = robot.slip * r * (mean[0] + mean[1]) / 2.0
    w = robot.slip * r * (mean[1] - mean[0]) / b
    half = 0.5 * w * dt
    chord = v * dt * (math.sin(half) / half if abs(half) > 1e-12 else 1.0 - half * half / 6.0)
    heading = robot.theta + half
    robot.x += chord * math.cos(heading)
    robot.y += chord * math.sin(heading)
    th = robot.theta + w * dt
    robot.theta = th if -math.pi < th <= math.pi else wrap_angle(th)
    robot.wheel_angles = robot.wheel_angles + mean * dt
    robot.wheel_rates = end

    if joint_targets is not None:
        tgt = np.asarray(joint_targets, dtype=float)
        tau = robot.joint_lag
        a = math.exp(-dt / tau) if tau > 0 else 0.0
        q_new = tgt + (robot.q - tgt) * a
        robot.joint_rates = (q_new - robot.q) / dt
        robot.q = q_new
    else:
        qd_end, qd_mean = _lag(robot.joint_rates, np.asarray(command.qdot, float),
                               robot.joint_lag, dt)
        robot.q = robot.q + qd_mean * dt
        robot.joint_rates = qd_end
    robot.q = m.clamp_joints(robot.q)
    robot.t += dt
    return robot


# ---------------------------------------------------------------------------
# Sensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BeamPattern:
    """Multi-ring spinning LiDAR: ``rings`` elevations evenly spread over
    ``vertical_fov`` (degrees), ``azimuth_count`` beams per ring."""

    rings: int = 16
    vertical_fov: tuple = (-15.0, 15.0)
    azimuth_count: int = 180
    min_range: float = 0.3
    max_range: float = 30.0

    def __post_init__(self):
        if self.rings < 1 or self.azimuth_count < 1:
            raise ValueError("beam pattern needs at least one ring and azimuth")
        if not 0 <= self.min_range < self.max_range:
            raise ValueError("invalid range limits")

    def directions(self) -> np.ndarray:
        lo, hi = self.vertical_fov
        el = np.radians(np.linspace(lo, hi, self.rings)) if self.rings > 1 else np.radians([lo])
        az = np.arange(self.azimuth_count) * (2 * math.pi / self.azimuth_count)
        E, A = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)


def simulate_lidar(world, sensor_pose: Pose, pattern: Optional[BeamPattern] = None,
                   sigma: float = 0.0, seed=0, t: float = 0.0) -> SurfacePointCloud:
    """One instantaneous scan in the sensor frame.

    Rays are cast against the as-built mesh plus live obstacles; Gaussian
    range noise is added and misses (or returns outside the range limits)
    are dropped. Noise is drawn for every beam so the random stream does not
    depend on the scene. Normals point back along each beam.
    """
    pattern = pattern or BeamPattern()
    rng = _rng(seed)
    d_local = pattern.directions()
    noise = rng.standard_normal(len(d_local)) * sigma
    mesh = _mesh_of(world, t)
    dirs = sensor_pose.transform_vector(d_local)
    origins = np.broadcast_to(sensor_pose.position, dirs.shape)
    rng_t, _ = mesh.raycast(origins, dirs, pattern.max_range)
    r = rng_t + noise
    keep = np.isfinite(rng_t) & (r >= pattern.min_range) & (r <= pattern.max_range)
    pts = d_local[keep] * r[keep, None]
    return SurfacePointCloud(pts, -d_local[keep], "lidar")


RANGEFINDER_MAX = 50.0


def simulate_rangefinder(world, sensor_pose: Pose, sigma: float = 0.0, seed=0,
                         t: float = 0.0, max_range: float = RANGEFINDER_MAX) -> float:
    """Distance along the sensor's +x axis, NaN when nothing is hit."""
    rng = _rng(seed)
    noise = float(rng.standard_normal()) * sigma
    mesh = _mesh_of(world, t)
    d = sensor_pose.transform_vector(np.array([1.0, 0.0, 0.0]))
    dist, _ = mesh.raycast(sensor_pose.position[None], d[None], max_range)
    if not np.isfinite(dist[0]):
        return math.nan
    return float(dist[0]) + noise


def imu_noise_sigmas(noise: NoiseConfig, rate: float = IMU_RATE) -> tuple:
    """Per-sample white-noise standard deviations from the noise densities."""
    return noise.gyro_noise_density * math.sqrt(rate), noise.accel_noise_density * math.sqrt(rate)


def simulate_imu(times, poses: Sequence[Pose], velocities=None,
                 noise: Optional[NoiseConfig] = None, seed=0,
                 gravity=(0.0, 0.0, -GRAVITY)) -> list:
    """IMU samples for a sampled trajectory.

    Sample ``k`` covers ``[t_k, t_k+1)`` and holds the mean body rate
    ``Log(R_k^T R_k+1) / dt`` and the specific force
    ``R_k^T (a - g)`` with ``a`` the finite-difference acceleration of the
    world velocities (central differences of positions if not given), plus
    bias and white noise.
    """
    t = np.asarray(times, dtype=float)
    if len(t) != len(poses) or len(t) < 2:
        raise ValueError("need matching times and poses (>= 2)")
    noise = noise or NoiseConfig().scaled(0.0)
    rng = _rng(seed)
    P = np.array([p.position for p in poses])
    V = np.gradient(P, t, axis=0) if velocities is None else np.asarray(velocities, float)
    g = np.asarray(gravity, dtype=float)
    dt_mean = float(np.mean(np.diff(t)))
    sg, sa = imu_noise_sigmas(noise, 1.0 / dt_mean)
    bg, ba = np.asarray(noise.gyro_bias), np.asarray(noise.accel_bias)
    out = []
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        Rk = poses[k].rotation
        gyro = so3_log(Rk.T @ poses[k + 1].rotation) / dt
        acc = Rk.T @ ((V[k + 1] - V[k]) / dt - g)
        n = rng.standard_normal(6)
        out.append(Measurement.imu(t[k], gyro + bg + sg * n[:3], acc + ba + sa * n[3:]))
    return out


def simulate_encoders(v: float, omega: float, t: float, dt: float, wheel_radius: float,
                      track_width: float, noise: Optional[NoiseConfig] = None,
                      seed=0) -> Measurement:
    """Wheel odometry for a true mean base twist over the last ``dt``.

    The wheels turn ``1 / slip`` times what the base motion implies, so slip
    shows up as a consistent odometry overestimate.
    """
    noise = noise or NoiseConfig().scaled(0.0)
    rng = _rng(seed)
    left, right = base_velocity_to_wheels(v / noise.slip, omega / noise.slip,
                                          wheel_radius, track_width)
    n = rng.standard_normal(2) * noise.encoder_sigma
    return Measurement.wheels(t, left + n[0], right + n[1], dt)


class SensorSuite:
    """Stateful sensor front-end for a running simulation.

    It tracks the previous IMU sample instant and the encoder wheel angles so
    that every emitted measurement is consistent with the ground truth the
    robot integrated.
    """

    def __init__(self, world: SimWorld, robot: SimRobot, noise: NoiseConfig,
                 pattern: Optional[BeamPattern] = None):
        self.world = world
        self.robot = robot
        self.noise = noise
        self.pattern = pattern or BeamPattern()
        self.rngs = noise.streams()
        self._imu_prev = self._imu_snapshot()
        self._enc_prev = (robot.t, robot.wheel_angles.copy())
        self.sg, self.sa = imu_noise_sigmas(noise)

    def _imu_snapshot(self):
        r = self.robot
        return r.t, r.base_pose(self.world).rotation, r.base_velocity(self.world)

    def imu(self) -> Measurement:
        """Sample for the interval since the previous call (stamped at its start)."""
        t0, R0, v0 = self._imu_prev
        t1, R1, v1 = snap = self._imu_snapshot()
        dt = t1 - t0
        if dt <= 0:
            raise ValueError("IMU sampled twice at the same instant")
        gyro = so3_log(R0.T @ R1) / dt
        acc = R0.T @ ((v1 - v0) / dt - self.world.gravity_vector)
        n = self.rngs["imu"].standard_normal(6)
        self._imu_prev = snap
        return Measurement.imu(t0, gyro + np.asarray(self.noise.gyro_bias) + self.sg * n[:3],
                               acc + np.asarray(self.noise.accel_bias) + self.sa * n[3:])

    def encoders(self) -> Measurement:
        r = self.robot
        t0, a0 = self._enc_prev
        dt = r.t - t0
        if dt <= 0:
            raise ValueError("encoders sampled twice at the same instant")
        rates = (r.wheel_angles - a0) / dt
        m = r.model
        v = r.slip * m.wheel_radius * (rates[0] + rates[1]) / 2.0
        w = r.slip * m.wheel_radius * (rates[1] - rates[0]) / m.track_width
        self._enc_prev = (r.t, r.wheel_angles.copy())
        return simulate_encoders(v, w, r.t, dt, m.wheel_radius, m.track_width,
                                 replace(self.noise, slip=r.slip), self.rngs["encoders"])

    def lidar(self) -> SurfacePointCloud:
        r = self.robot
        return simulate_lidar(self.world, r.lidar_pose(self.world), self.pattern,
                              self.noise.lidar_sigma, self.rngs["lidar"], r.t)

    def rangefinders(self) -> np.ndarray:
        r = self.robot
        return np.array([simulate_rangefinder(self.world, p, self.noise.rangefinder_sigma,
                                              self.rngs["rangefinder"], r.t)
                         for p in r.rangefinder_poses(self.world)])


# ---------------------------------------------------------------------------
# Ground-truth trace
# ---------------------------------------------------------------------------

TRUTH_COLUMNS = (["t", "x", "y", "z", "qw", "qx", "qy", "qz"] + [f"q{i}" for i in range(6)]
                 + ["ee_x", "ee_y", "ee_z"])


class GroundTruthLog:
    def __init__(self):
        self.rows: list = []

    def record(self, world: SimWorld, robot: SimRobot) -> None:
        b = robot.base_pose(world)
        ee = robot.ee_pose(world)
        self.rows.append([robot.t, *b.position, *b.orientation, *robot.q, *ee.position])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRUTH_COLUMNS)
            for row in self.rows:
                w.writerow([repr(float(v)) for v in row])


def read_ground_truth(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(TRUTH_COLUMNS):
        raise ValueError("not a ground-truth trace")
    return np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(TRUTH_COLUMNS))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    world: SimWorld
    model: KinematicModel
    spawn: tuple                      # x, y, theta in floor coordinates
    mounts: SensorMounts              # true sensor mounts
    believed_rangefinders: RangefinderExtrinsics
    noise: NoiseConfig
    tasks: tuple                      # raw task dicts, parsed by the manager
    cycles: int = 1
    options: dict = field(default_factory=dict)
    base_lag: float = 0.05
    joint_lag: float = 0.02
    source: Optional[str] = None

    def make_robot(self) -> SimRobot:
        x, y, th = self.spawn
        state = RobotState9(x, y, th, self.model.default_joints)
        return SimRobot(self.model, state, self.mounts, self.base_lag, self.joint_lag,
                        self.noise.slip)


def _world_from_dict(d: dict, base_dir: Path) -> SimWorld:
    extras = [box_mesh(b["lo"], b["hi"], b.get("name", "box")) for b in d.get("boxes", [])]
    built = d.get("as_built", {}) or {}
    if "room" in d:
        room = d["room"]
        corners = np.asarray(room["corners"], dtype=float)
        height = float(room.get("height", 3.0))
        planned = merge_meshes([planned_room_mesh(corners, height)] + extras, "as_planned")
        bc = corners
        for idx, off in sorted((built.get("wall_offsets") or {}).items()):
            bc = offset_wall(bc, int(idx), float(off))
        floor = FloorPlane()
        if built.get("floor_tilt_deg"):
            floor = FloorPlane.tilted(float(built["floor_tilt_deg"]),
                                      built.get("floor_tilt_axis", (0.0, 1.0, 0.0)),
                                      built.get("floor_pivot", (0.0, 0.0)))
        as_built = merge_meshes([room_mesh(bc, height, floor)] + extras, "as_built")
    elif "mesh" in d:
        planned = merge_meshes([load_mesh(base_dir / d["mesh"])] + extras, "as_planned")
        floor = FloorPlane()
        as_built = (merge_meshes([load_mesh(base_dir / built["mesh"])] + extras, "as_built")
                    if "mesh" in built else planned)
    else:
        raise ValueError("world needs a 'room' or a 'mesh'")
    built_extra = [box_mesh(b["lo"], b["hi"], b.get("name", "clutter"))
                   for b in built.get("boxes", [])]
    if built_extra:
        as_built = merge_meshes([as_built] + built_extra, "as_built")
    obstacles = [Obstacle(box_mesh(o["lo"], o["hi"], o.get("name", "obstacle")),
                          float(o.get("spawn_time", 0.0)),
                          float(o.get("despawn_time", math.inf)))
                 for o in d.get("obstacles", [])]
    return SimWorld(as_built, planned, obstacles, float(d.get("gravity", GRAVITY)), floor)


def scenario_from_dict(d: dict, base_dir=".", source: Optional[str] = None) -> Scenario:
    base_dir = Path(base_dir)
    world = _world_from_dict(d["world"], base_dir)
    rd = d.get("robot", {}) or {}
    model = model_from_dict(rd["model"]) if "model" in rd else KinematicModel.default()
    believed = default_rangefinders()
    true_rf = believed
    mis = rd.get("rangefinder_miscalibration_deg")
    if mis:
        axis = np.asarray(rd.get("miscalibration_axis", (0.0, 1.0, 0.0)), dtype=float)
        true_rf = head_rotated(believed, axis / np.linalg.norm(axis) * math.radians(float(mis)))
    mounts = SensorMounts(rangefinders=true_rf)
    noise = NoiseConfig(**(d.get("noise") or {}))
    if "seed" in d:
        noise = replace(noise, seed=int(d["seed"]))
    spawn = tuple(float(v) for v in rd.get("spawn", (0.0, 0.0, 0.0)))
    if len(spawn) != 3:
        raise ValueError("robot spawn is [x, y, theta]")
    tasks = tuple(d.get("tasks", []))
    if not tasks:
        raise ValueError("scenario has no tasks")
    cycles = int(d.get("cycles", 1))
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    lag = rd.get("lag", {}) or {}
    return Scenario(d.get("name", "scenario"), world, model, spawn, mounts, believed, noise,
                    tasks, cycles, dict(d.get("options", {}) or {}),
                    float(lag.get("base", 0.05)), float(lag.get("joints", 0.02)), source)


def load_scenario(path, seed: Optional[int] = None, noise_scale: Optional[float] = None) -> Scenario:
    path = Path(path)
    d = yaml.safe_load(path.read_text())
    sc = scenario_from_dict(d, path.parent, str(path))
    noise = sc.noise
    if seed is not None:
        noise = replace(noise, seed=int(seed))
    if noise_scale is not None:
        noise = noise.scaled(noise_scale)
    return replace(sc, noise=noise) if noise is not sc.noise else sc
