"""Localization against the building model.

Two estimators live here: point-to-plane ICP that registers a LiDAR cloud
against a cloud sampled from the model mesh, and the high-accuracy
localization (HAL) refinement that fits the base position to laser
rangefinder readings taken from several end-effector viewpoints.
"""

from __future__ import annotations

import json
import math
import warnings
import weakref
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, SurfacePointCloud, TriangleMesh, quat_from_rotvec, so3_exp

CAUCHY_SCALE = 0.005
INLIER_SIGMAS = 3.0


# ---------------------------------------------------------------------------
# Robust kernel
# ---------------------------------------------------------------------------

def cauchy(r, scale: float = CAUCHY_SCALE):
    """Cauchy loss ``(s^2 / 2) ln(1 + (r / s)^2)``."""
    if scale <= 0:
        raise ValueError("Cauchy scale must be positive")
    r = np.asarray(r, dtype=float)
    out = 0.5 * scale * scale * np.log1p((r / scale) ** 2)
    return float(out) if out.ndim == 0 else out


def cauchy_derivative(r, scale: float = CAUCHY_SCALE):
    r = np.asarray(r, dtype=float)
    out = r / (1.0 + (r / scale) ** 2)
    return float(out) if out.ndim == 0 else out


def cauchy_weight(r, scale: float = CAUCHY_SCALE):
    """IRLS weight ``psi(r) / r``."""
    r = np.asarray(r, dtype=float)
    return 1.0 / (1.0 + (r / scale) ** 2)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 30
    correspondence_radius: float = 1.0
    convergence_translation: float = 1e-7
    convergence_rotation: float = 1e-7
    outlier_trim_ratio: float = 0.0
    min_correspondences: int = 6
    robust_scale: Optional[float] = None      # Cauchy scale (m); None = least squares

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.correspondence_radius <= 0:
            raise ValueError("correspondence_radius must be positive")
        if not 0.0 <= self.outlier_trim_ratio < 1.0:
            raise ValueError("outlier_trim_ratio must be in [0, 1)")
        if self.robust_scale is not None and self.robust_scale <= 0:
            raise ValueError("robust_scale must be positive")


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    mean_residual: float
    matched_fraction: float
    iterations_used: int
    converged: bool
    residual_history: tuple = ()


_TREES: "weakref.WeakKeyDictionary[SurfacePointCloud, cKDTree]" = weakref.WeakKeyDictionary()


def _map_tree(cloud: SurfacePointCloud) -> cKDTree:
    tree = _TREES.get(cloud)
    if tree is None:
        tree = cKDTree(cloud.points)
        _TREES[cloud] = tree
    return tree


def _associate(points, map_cloud, tree, cfg: IcpConfig):
    dist, idx = tree.query(points, distance_upper_bound=cfg.correspondence_radius)
    ok = np.isfinite(dist)
    p = points[ok]
    q = map_cloud.points[idx[ok]]
    n = map_cloud.normals[idx[ok]]
    r = np.einsum("ij,ij->i", p - q, n)
    if cfg.outlier_trim_ratio > 0 and len(r):
        keep = int(math.ceil((1.0 - cfg.outlier_trim_ratio) * len(r)))
        order = np.argsort(np.abs(r), kind="stable")[:keep]
        p, n, r = p[order], n[order], r[order]
    return p, n, r


def icp_point_to_plane(scan: SurfacePointCloud, map_cloud: SurfacePointCloud,
                       init: Pose, cfg: Optional[IcpConfig] = None) -> IcpResult:
    """Register ``scan`` (sensor frame) to ``map_cloud`` (model frame).

    Each iteration re-associates nearest neighbours, drops pairs beyond the
    correspondence radius and the worst ``outlier_trim_ratio`` share, then
    takes a linearized point-to-plane step. Steps that would raise the mean
    absolute residual are halved, and rejected if they never improve it, so
    the residual history is non-increasing.

    With ``robust_scale`` the step is reweighted with a Cauchy kernel and
    the history tracks the mean Cauchy loss instead, which keeps a few
    unmodelled points (people, boxes) from dragging weakly observed axes.
    """
    cfg = cfg or IcpConfig()
    if len(scan) == 0 or len(map_cloud) == 0:
        raise ValueError("ICP needs non-empty scan and map clouds")
    tree = _map_tree(map_cloud)
    n_scan = len(scan)

    pose = init
    p, n, r = _associate(pose.transform_point(scan.points), map_cloud, tree, cfg)
    if len(r) < cfg.min_correspondences:
        return IcpResult(init, math.inf, len(r) / n_scan, 0, False, ())
    c_rob = cfg.robust_scale

    def score(res):
        if c_rob is None:
            return float(np.mean(np.abs(res)))
        return float(np.mean(cauchy(res, c_rob)))

    cost = score(r)
    history = [cost]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        c = p.mean(axis=0)
        J = np.hstack([np.cross(p - c, n), n])
        w = np.ones(len(r)) if c_rob is None else cauchy_weight(r, c_rob)
        H = J.T @ (J * w[:, None])
        H += np.eye(6) * 1e-12 * max(np.trace(H), 1.0)
        xi = -np.linalg.solve(H, J.T @ (w * r))
        accepted = False
        for _ in range(12):
            R = so3_exp(xi[:3])
            delta = Pose.from_rotation(c + xi[3:] - R @ c, R)
            cand = delta @ pose
            cp, cn, cr = _associate(cand.transform_point(scan.points), map_cloud, tree, cfg)
            if len(cr) >= cfg.min_correspondences:
                ccost = score(cr)
                if ccost <= cost:
                    accepted = True
                    break
            xi = 0.5 * xi
        small = (np.linalg.norm(xi[3:]) < cfg.convergence_translation
                 and np.linalg.norm(xi[:3]) < cfg.convergence_rotation)
        if not accepted:
            converged = True
            break
        pose, p, n, r, cost = cand, cp, cn, cr, ccost
        history.append(cost)
        if small or cost == 0.0:
            converged = True
            break
    return IcpResult(pose, cost, len(r) / n_scan, it, converged, tuple(history))


# ---------------------------------------------------------------------------
# HAL
# ---------------------------------------------------------------------------

class HalError(RuntimeError):
    """No usable rangefinder ray: model and pose guess do not agree."""


@dataclass(frozen=True)
class RangefinderExtrinsics:
    """Pose of each laser distance sensor in the end-effector frame.

    Every sensor measures along its own +x axis.
    """

    sensors: tuple
    names: tuple = ()

    def __post_init__(self):
        sensors = tuple(self.sensors)
        if not sensors:
            raise ValueError("at least one rangefinder is required")
        if not all(isinstance(s, Pose) for s in sensors):
            raise TypeError("sensor extrinsics must be Pose objects")
        names = tuple(self.names) or tuple(f"sensor{i}" for i in range(len(sensors)))
        if len(names) != len(sensors):
            raise ValueError("one name per sensor")
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.sensors)

    def rotated(self, rotvec) -> "RangefinderExtrinsics":
        """Every sensor rotated by ``rotvec`` about its own origin."""
        d = Pose([0, 0, 0], quat_from_rotvec(rotvec))
        return RangefinderExtrinsics(tuple(s @ d for s in self.sensors), self.names)


def save_extrinsics(ext: RangefinderExtrinsics, path) -> None:
    lines = ["# rangefinder poses in the end-effector frame",
             "# quaternion is w x y z (Hamilton); each sensor measures along +x",
             f"count = {len(ext)}"]
    for i, (name, s) in enumerate(zip(ext.names, ext.sensors)):
        lines.append(f"sensor{i}.name = {name}")
        lines.append(f"sensor{i}.translation = " + " ".join(f"{v:.17g}" for v in s.position))
        lines.append(f"sensor{i}.quaternion = " + " ".join(f"{v:.17g}" for v in s.orientation))
    Path(path).write_text("\n".join(lines) + "\n")


def load_extrinsics(path) -> RangefinderExtrinsics:
    kv = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed extrinsics line: {raw!r}")
        kv[key.strip()] = value.strip()
    count = int(kv["count"])
    sensors, names = [], []
    for i in range(count):
        t = [float(v) for v in kv[f"sensor{i}.translation"].split()]
        q = [float(v) for v in kv[f"sensor{i}.quaternion"].split()]
        sensors.append(Pose(t, q))
        names.append(kv.get(f"sensor{i}.name", f"sensor{i}"))
    return RangefinderExtrinsics(tuple(sensors), tuple(names))


@dataclass(frozen=True, eq=False)
class HalObservationSet:
    """Rangefinder readings from several end-effector viewpoints.

    ``viewpoints[i]`` is the end-effector pose in the base frame (from joint
    encoders, treated as exact). ``distances[i, s]`` is sensor ``s``'s reading
    at viewpoint ``i``; NaN marks a missing reading.
    """

    viewpoints: tuple
    distances: np.ndarray
    initial_guess: Pose

    def __post_init__(self):
        vps = tuple(self.viewpoints)
        d = np.array(self.distances, dtype=float)
        if d.ndim != 2 or d.shape[0] != len(vps):
            raise ValueError("distances must be (viewpoints, sensors)")
        finite = d[np.isfinite(d)]
        if np.any(finite <= 0):
            raise ValueError("rangefinder distances must be positive")
        d.setflags(write=False)
        object.__setattr__(self, "viewpoints", vps)
        object.__setattr__(self, "distances", d)


def sensor_rays(position, orientation, obs: HalObservationSet, ext: RangefinderExtrinsics):
    """Origins and unit directions (model frame) for every (viewpoint, sensor)."""
    base = Pose(position, orientation)
    origins, dirs = [], []
    for vp in obs.viewpoints:
        ee = base @ vp
        for s in ext.sensors:
            sp = ee @ s
            origins.append(sp.position)
            dirs.append(sp.rotation[:, 0])
    return np.array(origins), np.array(dirs)


@dataclass(frozen=True, eq=False)
class _Planes:
    """Retrieved planes for the usable measurements; the HAL residual is
    affine in the base position once these are fixed."""

    index: np.ndarray     # flat (viewpoint * sensors + sensor) measurement index
    z: np.ndarray
    support: np.ndarray
    normal: np.ndarray
    offset: np.ndarray    # ray origin minus base position
    jac: np.ndarray       # d r / d position = n / (d . n)
    dropped: int

    def residuals(self, position):
        origin = self.offset + position
        # expected = ((t_p - o) . n) / (d . n); jac already holds n / (d . n)
        expected = np.einsum("ij,ij->i", self.support - origin, self.jac)
        return self.z - expected


def _retrieve_planes(position, orientation, obs, ext, mesh: TriangleMesh) -> _Planes:
    origins, dirs = sensor_rays(position, orientation, obs, ext)
    z = obs.distances.reshape(-1)
    have = np.isfinite(z)
    t, tri = mesh.raycast(origins, dirs)
    hit = tri >= 0
    n = mesh.normals[np.maximum(tri, 0)]
    dn = np.einsum("ij,ij->i", dirs, n)
    ok = have & hit & (np.abs(dn) > 1e-9)
    missed = int(np.sum(have & ~ok))
    if missed:
        warnings.warn(f"{missed} rangefinder ray(s) found no usable plane and were dropped",
                      RuntimeWarning, stacklevel=3)
    if not np.any(ok):
        raise HalError("no rangefinder ray hits the model; pose guess and model disagree")
    idx = np.flatnonzero(ok)
    support = mesh.vertices[mesh.triangles[tri[idx], 0]]
    return _Planes(idx, z[idx], support, n[idx], origins[idx] - np.asarray(position, float),
                   n[idx] / dn[idx, None], missed)


@dataclass(frozen=True, eq=False)
class HalResidual:
    residuals: np.ndarray
    cost: float
    gradient: np.ndarray
    jacobian: np.ndarray
    measurement_index: np.ndarray
    dropped: int


def hal_residual(position, obs: HalObservationSet, ext: RangefinderExtrinsics,
                 mesh: TriangleMesh, scale: float = CAUCHY_SCALE) -> HalResidual:
    """Residuals ``z - expected`` at ``position`` with planes retrieved there.

    The orientation is the observation set's initial guess. ``cost`` is the
    summed Cauchy loss and ``gradient`` its derivative with respect to the
    base position (planes held fixed, which is exact away from triangle
    edges).
    """
    position = np.asarray(position, dtype=float)
    planes = _retrieve_planes(position, obs.initial_guess.orientation, obs, ext, mesh)
    r = planes.residuals(position)
    grad = cauchy_derivative(r, scale) @ planes.jac
    return HalResidual(r, float(np.sum(cauchy(r, scale))), np.asarray(grad), planes.jac,
                       planes.index, planes.dropped)


@dataclass(frozen=True, eq=False)
class HalResult:
    position: np.ndarray
    orientation: np.ndarray
    cost: float
    residuals: np.ndarray
    inliers: np.ndarray
    measurement_index: np.ndarray
    iterations: int
    success: bool
    diagnostic: str = ""
    cost_history: tuple = ()

    @property
    def pose(self) -> Pose:
        return Pose(self.position, self.orientation)

    @property
    def inlier_fraction(self) -> float:
        return float(np.mean(self.inliers)) if len(self.inliers) else 0.0


def _solve_fixed_planes(planes: _Planes, x0, scale, max_iter=50):
    """Levenberg-damped IRLS on the Cauchy cost with planes held fixed."""
    x = x0.copy()
    r = planes.residuals(x)
    cost = float(np.sum(cauchy(r, scale)))
    lam = 1e-4
    J = planes.jac
    for _ in range(max_iter):
        g = cauchy_derivative(r, scale) @ J
        w = cauchy_weight(r, scale)
        H = (J * w[:, None]).T @ J
        if not np.any(g):
            break
        improved = False
        for _ in range(20):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            xn = x + step
            rn = planes.residuals(xn)
            cn = float(np.sum(cauchy(rn, scale)))
            if cn <= cost:
                improved = True
                lam = max(lam * 0.3, 1e-12)
                break
            lam *= 10
        if not improved:
            break
        done = np.linalg.norm(step) < 1e-13 or cost - cn <= 1e-18
        x, r, cost = xn, rn, cn
        if done:
            break
    return x, cost


def hal_localize(obs: HalObservationSet, ext: RangefinderExtrinsics, mesh: TriangleMesh,
                 iterations: int = 5, scale: float = CAUCHY_SCALE) -> HalResult:
    """Refine the base position from rangefinder readings.

    The orientation of ``obs.initial_guess`` is held fixed and returned
    unchanged. Each outer iteration re-traces every sensor ray from the
    current estimate to pick up the planes it measures against, then solves
    the robust problem with those planes fixed. Three consecutive outer
    increases of the cost abort with the best position seen so far.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    q = obs.initial_guess.orientation
    x = np.array(obs.initial_guess.position, dtype=float)
    best_x, best_cost = x.copy(), math.inf
    history = []
    rises = 0
    it = 0
    for it in range(1, iterations + 1):
        planes = _retrieve_planes(x, q, obs, ext, mesh)
        start = float(np.sum(cauchy(planes.residuals(x), scale)))
        if history and start > history[-1]:
            rises += 1
        else:
            rises = 0
        history.append(start)
        if rises >= 3:
            return _finish(best_x, q, obs, ext, mesh, scale, it, False,
                           "cost increased on 3 consecutive outer iterations", history)
        x_new, cost = _solve_fixed_planes(planes, x, scale)
        if cost < best_cost:
            best_x, best_cost = x_new.copy(), cost
        moved = np.linalg.norm(x_new - x)
        x = x_new
        if moved < 1e-12:
            break
    return _finish(x, q, obs, ext, mesh, scale, it, True, "", history)


def _finish(x, q, obs, ext, mesh, scale, it, success, diag, history) -> HalResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        planes = _retrieve_planes(x, q, obs, ext, mesh)
    r = planes.residuals(x)
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return HalResult(x, q, float(np.sum(cauchy(r, scale))), r,
                     np.abs(r) <= INLIER_SIGMAS * scale, planes.index, it, success, diag,
                     tuple(history))


def append_hal_log(path, result: HalResult, **extra) -> None:
    """Append one JSON line describing a HAL run."""
    rec = dict(extra)
    rec.update(
        position=[float(v) for v in result.position],
        orientation=[float(v) for v in result.orientation],
        cost=result.cost,
        residuals=[float(v) for v in result.residuals],
        inliers=[bool(v) for v in result.inliers],
        measurement_index=[int(v) for v in result.measurement_index],
        iterations=result.iterations,
        success=result.success,
        diagnostic=result.diagnostic,
    )
    with open(path, "a") as fh:
        fh.write(json.dumps(rec) + "\n")


def read_hal_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
