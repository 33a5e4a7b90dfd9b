"""Rigid transforms, quaternions, triangle meshes and ray casting.

Quaternions are Hamilton convention, stored scalar-first as ``[w, x, y, z]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

HIT_EPSILON = 1e-9
_BARY_EPS = 1e-12


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------

def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-8:
        # second-order Taylor terms keep this exact to machine precision
        half = 0.5 - angle * angle / 48.0
        return _unit(np.array([1.0 - angle * angle / 8.0, *(half * v)]))
    axis = v / angle
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def quat_to_rotvec(q):
    """Log map of a unit quaternion, taking the shortest rotation."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-8:
        return vec * (2.0 / q[0]) * (1.0 - s * s / (3.0 * q[0] * q[0]))
    angle = 2.0 * np.arctan2(s, q[0])
    return vec * (angle / s)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = _unit(np.array(q))
    return q if q[0] >= 0 else -q


def so3_exp(v):
    """Rodrigues formula; matrix exponential of ``skew(v)``."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    a2 = x * x + y * y + z * z
    if a2 < 1e-16:
        s, c = 1.0 - a2 / 6.0, 0.5 - a2 / 24.0
    else:
        a = math.sqrt(a2)
        s, c = math.sin(a) / a, (1.0 - math.cos(a)) / a2
    return np.array([
        [1 - c * (y * y + z * z), c * x * y - s * z, c * x * z + s * y],
        [c * x * y + s * z, 1 - c * (x * x + z * z), c * y * z - s * x],
        [c * x * z - s * y, c * y * z + s * x, 1 - c * (x * x + y * y)],
    ])


def so3_log(R):
    """Rotation vector of ``R``; the quaternion route is used near pi."""
    R = np.asarray(R, dtype=float)
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    if c < -0.99:
        return quat_to_rotvec(quat_from_matrix(R))
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = math.sqrt(float(w @ w))
    if s < 1e-8:
        return w * (1.0 + s * s / 6.0)
    return w * (math.atan2(s, c) / s)


def right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    a = np.linalg.norm(phi)
    K = skew(phi)
    if a < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1 - np.cos(a)) / a**2 * K + (a - np.sin(a)) / a**3 * K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    a = np.linalg.norm(phi)
    K = skew(phi)
    if a < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / a**2 - (1 + np.cos(a)) / (2 * a * np.sin(a))
    return np.eye(3) + 0.5 * K + c * K @ K


def left_jacobian_inv(phi):
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def quat_slerp(q0, q1, s):
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(q0 @ q1)
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        return _unit(q0 + s * (q1 - q0))
    rel = quat_mul(quat_conj(q0), q1)
    return _unit(quat_mul(q0, quat_from_rotvec(s * quat_to_rotvec(rel))))


def quat_angle(q0, q1):
    """Rotation angle between two orientations, in [0, pi]."""
    return float(np.linalg.norm(quat_to_rotvec(quat_mul(q0, quat_conj(q1)))))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def _unit(v):
    return v / np.linalg.norm(v)


def _frozen(a, shape=None):
    a = np.array(a, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: ``x_parent = R @ x_child + position``."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        q = np.array(self.orientation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("orientation quaternion must be non-zero")
        object.__setattr__(self, "orientation", _frozen(q / n))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]))

    @classmethod
    def from_rotvec(cls, position, rotvec) -> "Pose":
        return cls(position, quat_from_rotvec(rotvec))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], quat_from_matrix(T[:3, :3]))

    @classmethod
    def from_rotation(cls, position, R) -> "Pose":
        return cls(position, quat_from_matrix(R))

    @classmethod
    def from_planar(cls, x: float, y: float, theta: float, z: float = 0.0) -> "Pose":
        return cls([x, y, z], [np.cos(theta / 2), 0.0, 0.0, np.sin(theta / 2)])

    @classmethod
    def translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls([x, y, z], [1.0, 0, 0, 0])

    @classmethod
    def rot_z(cls, angle: float) -> "Pose":
        return cls.from_planar(0.0, 0.0, angle)

    @cached_property
    def rotation(self) -> np.ndarray:
        R = quat_to_matrix(self.orientation)
        R.setflags(write=False)
        return R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    @property
    def yaw(self) -> float:
        R = self.rotation
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def inverse(self) -> "Pose":
        qi = quat_conj(self.orientation)
        return Pose(-(self.rotation.T @ self.position), qi)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def transform_point(self, p):
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.position

    def transform_vector(self, v):
        return np.asarray(v, dtype=float) @ self.rotation.T

    def planar(self) -> tuple[float, float, float]:
        return float(self.position[0]), float(self.position[1]), self.yaw

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.linalg.norm(self.position - other.position) <= atol
                and quat_angle(self.orientation, other.orientation) <= atol)

    def __repr__(self):
        p = np.array2string(self.position, precision=6)
        q = np.array2string(self.orientation, precision=6)
        return f"Pose(position={p}, orientation={q})"


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.position + a.position, quat_mul(a.orientation, b.orientation))


def inverse(p: Pose) -> Pose:
    return p.inverse()


def boxminus(a: Pose, b: Pose) -> np.ndarray:
    """6-vector difference: position difference, then the rotation vector of
    ``q_a * conj(q_b)`` (world-frame orientation error)."""
    rot = quat_to_rotvec(quat_mul(a.orientation, quat_conj(b.orientation)))
    return np.concatenate([a.position - b.position, rot])


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        d = np.array(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "direction", _frozen(d / n))

    @classmethod
    def from_pose(cls, pose: Pose) -> "Ray":
        """Ray along the +x axis of ``pose``."""
        return cls(pose.position, pose.rotation[:, 0])


@dataclass(frozen=True)
class RayHit:
    distance: float
    plane_support: np.ndarray
    plane_normal: np.ndarray
    triangle_index: int


class TriangleMesh:
    """Indexed triangle mesh with per-triangle unit normals.

    Normals follow the right-hand winding of each triangle. Arrays are
    read-only; the ray acceleration structure is built on first use.
    """

    def __init__(self, vertices, triangles, name: str = "mesh"):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        cr = np.cross(b - a, c - a)
        area2 = np.linalg.norm(cr, axis=1)
        if np.any(area2 / 2 <= 1e-12):
            raise ValueError("degenerate triangle (area <= 1e-12 m^2)")
        n = cr / area2[:, None] if len(t) else np.zeros((0, 3))
        self.vertices = _frozen(v)
        self.triangles = t
        self.triangles.setflags(write=False)
        self.normals = _frozen(n)
        self.areas = _frozen(area2 / 2)
        self.name = name

    def __len__(self):
        return len(self.triangles)

    def __repr__(self):
        return f"TriangleMesh({self.name!r}, {len(self.vertices)} vertices, {len(self)} triangles)"

    @classmethod
    def empty(cls, name: str = "empty") -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), name)

    @property
    def corners(self):
        """(T, 3, 3) array of triangle vertex coordinates."""
        return self.vertices[self.triangles]

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def bounds(self):
        if not len(self.vertices):
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.transform_point(self.vertices), self.triangles, self.name)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], self.name)

    @cached_property
    def bvh(self) -> "BVH":
        return BVH(self)

    def raycast(self, origins, directions, max_distance: float = np.inf):
        """Nearest hit for a batch of rays via the BVH.

        Returns ``(distance, triangle_index)``; misses have ``inf`` / ``-1``.
        """
        return self.bvh.intersect(origins, directions, max_distance)


def merge_meshes(meshes: Iterable[TriangleMesh], name: str = "merged") -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    if not verts:
        return TriangleMesh.empty(name)
    return TriangleMesh(np.vstack(verts), np.vstack(tris), name)


def quad_mesh(p0, p1, p2, p3, name: str = "quad") -> TriangleMesh:
    """Planar quad ``p0-p1-p2-p3`` (counter-clockwise seen from the normal side)."""
    return TriangleMesh([p0, p1, p2, p3], [[0, 1, 2], [0, 2, 3]], name)


def box_mesh(lo, hi, name: str = "box", inward: bool = False) -> TriangleMesh:
    """Axis-aligned box; normals point outward unless ``inward``."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = [[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
         [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]]
    t = [[0, 2, 1], [0, 3, 2],      # bottom (-z)
         [4, 5, 6], [4, 6, 7],      # top (+z)
         [0, 1, 5], [0, 5, 4],      # -y
         [2, 3, 7], [2, 7, 6],      # +y
         [1, 2, 6], [1, 6, 5],      # +x
         [3, 0, 4], [3, 4, 7]]      # -x
    mesh = TriangleMesh(v, t, name)
    return mesh.flipped() if inward else mesh


def ray_triangle_intersect(origins, directions, corners):
    """Moller-Trumbore for every (ray, triangle) pair.

    ``origins``/``directions`` are (R, 3), ``corners`` is (T, 3, 3).
    Returns an (R, T) distance array with ``inf`` for misses.
    """
    a = corners[:, 0]
    e1 = corners[:, 1] - a
    e2 = corners[:, 2] - a
    p = np.cross(directions[:, None, :], e2[None, :, :])
    det = np.einsum("rtk,tk->rt", p, e1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = origins[:, None, :] - a[None, :, :]
        u = np.einsum("rtk,rtk->rt", s, p) * inv
        qv = np.cross(s, e1[None, :, :])
        v = np.einsum("rk,rtk->rt", directions, qv) * inv
        t = np.einsum("tk,rtk->rt", e2, qv) * inv
        ok = ((np.abs(det) > 1e-14) & (u >= -_BARY_EPS) & (v >= -_BARY_EPS)
              & (u + v <= 1 + _BARY_EPS) & (t > HIT_EPSILON))
    return np.where(ok, t, np.inf)


def raycast_bruteforce(mesh: TriangleMesh, origins, directions, max_distance: float = np.inf):
    """Exhaustive nearest-hit search over all triangles (reference path)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    if len(mesh) == 0:
        return best_t, best_i
    corners = mesh.corners
    chunk = max(1, 200_000 // max(len(mesh), 1))
    for s in range(0, n, chunk):
        t = ray_triangle_intersect(origins[s:s + chunk], directions[s:s + chunk], corners)
        idx = np.argmin(t, axis=1)
        tt = t[np.arange(len(idx)), idx]
        hit = tt <= max_distance
        best_t[s:s + chunk] = np.where(hit, tt, np.inf)
        best_i[s:s + chunk] = np.where(hit & np.isfinite(tt), idx, -1)
    return best_t, best_i


class BVH:
    """Median-split bounding volume hierarchy with batched ray traversal."""

    leaf_size = 4

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        corners = mesh.corners
        n = len(corners)
        lo_list, hi_list, left, right, start, count = [], [], [], [], [], []
        order = np.arange(n)
        tri_lo = corners.min(axis=1) if n else np.zeros((0, 3))
        tri_hi = corners.max(axis=1) if n else np.zeros((0, 3))
        cent = corners.mean(axis=1) if n else np.zeros((0, 3))

        def build(lo_idx, hi_idx):
            node = len(lo_list)
            idx = order[lo_idx:hi_idx]
            lo_list.append(tri_lo[idx].min(axis=0) - 1e-9)
            hi_list.append(tri_hi[idx].max(axis=0) + 1e-9)
            left.append(-1)
            right.append(-1)
            start.append(lo_idx)
            count.append(hi_idx - lo_idx)
            if hi_idx - lo_idx <= self.leaf_size:
                return node
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            srt = idx[np.argsort(c[:, axis], kind="stable")]
            order[lo_idx:hi_idx] = srt
            mid = (lo_idx + hi_idx) // 2
            left[node] = build(lo_idx, mid)
            right[node] = build(mid, hi_idx)
            count[node] = 0
            return node

        if n:
            build(0, n)
        self.order = order
        self.node_lo = np.array(lo_list).reshape(-1, 3)
        self.node_hi = np.array(hi_list).reshape(-1, 3)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.leaf_corners = corners[order] if n else corners

    def intersect(self, origins, directions, max_distance: float = np.inf):
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_i = np.full(n, -1, dtype=np.int64)
        if len(self.node_lo) == 0 or n == 0:
            return best_t, best_i
        with np.errstate(divide="ignore"):
            inv_d = 1.0 / directions
        limit = np.full(n, float(max_distance))
        stack = [(0, np.arange(n))]
        while stack:
            node, rays = stack.pop()
            o = origins[rays]
            inv = inv_d[rays]
            with np.errstate(invalid="ignore"):
                t1 = (self.node_lo[node] - o) * inv
                t2 = (self.node_hi[node] - o) * inv
            tmin = np.fmin(t1, t2).max(axis=1)
            tmax = np.fmax(t1, t2).min(axis=1)
            bound = np.minimum(best_t[rays], limit[rays])
            keep = (tmax >= np.maximum(tmin, 0.0)) & (tmin <= bound)
            rays = rays[keep]
            if not len(rays):
                continue
            if self.count[node]:
                s = self.start[node]
                c = self.count[node]
                t = ray_triangle_intersect(origins[rays], directions[rays],
                                           self.leaf_corners[s:s + c])
                tri = self.order[s:s + c]
                # lexicographic (distance, triangle index) so ties match brute force
                for k in range(c):
                    tk = t[:, k]
                    better = (tk < best_t[rays]) | ((tk == best_t[rays]) & np.isfinite(tk)
                                                    & (tri[k] < best_i[rays]))
                    better &= tk <= limit[rays]
                    best_t[rays[better]] = tk[better]
                    best_i[rays[better]] = tri[k]
            else:
                stack.append((self.left[node], rays))
                stack.append((self.right[node], rays))
        return best_t, best_i


def raytrace(mesh: TriangleMesh, ray: Ray, max_distance: float = np.inf) -> Optional[RayHit]:
    """Nearest intersection of ``ray`` with ``mesh`` beyond the hit epsilon."""
    t, i = mesh.raycast(ray.origin[None], ray.direction[None], max_distance)
    if i[0] < 0:
        return None
    k = int(i[0])
    return RayHit(float(t[0]), mesh.vertices[mesh.triangles[k, 0]].copy(),
                  mesh.normals[k].copy(), k)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SurfacePointCloud:
    points: np.ndarray
    normals: np.ndarray
    frame: str = "model"

    def __post_init__(self):
        p = _frozen(np.asarray(self.points, dtype=float).reshape(-1, 3))
        n = _frozen(np.asarray(self.normals, dtype=float).reshape(-1, 3))
        if len(p) != len(n):
            raise ValueError("points and normals must have equal length")
        if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-9:
            raise ValueError("normals must be unit length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose, frame: Optional[str] = None) -> "SurfacePointCloud":
        n = pose.transform_vector(self.normals)
        if len(n):
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return SurfacePointCloud(pose.transform_point(self.points), n, frame or self.frame)


def sample_surface(mesh: TriangleMesh, density: float, seed: int = 0,
                   triangle_index: bool = False):
    """Area-weighted uniform surface sampling.

    The point count is Poisson with mean ``density * area``. Uses a Philox
    (counter-based) generator so the cloud depends only on ``seed``.
    """
    if len(mesh) == 0:
        raise ValueError("cannot sample an empty mesh")
    if density <= 0:
        raise ValueError("density must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    total = mesh.total_area
    n = int(rng.poisson(density * total))
    tri = rng.choice(len(mesh), size=n, p=mesh.areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners[tri]
    pts = ((1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1]
           + (r1 * r2)[:, None] * c[:, 2])
    cloud = SurfacePointCloud(pts, mesh.normals[tri], mesh.name)
    return (cloud, tri) if triangle_index else cloud


def point_in_triangle(points, corners, tol: float = 1e-9):
    """Membership of each point in its paired triangle (plane + barycentric)."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=1)
    plane = np.abs(np.einsum("ij,ij->i", points - a, n)) / nn
    # barycentric via sub-triangle areas
    def sub(p, q, r):
        return np.einsum("ij,ij->i", np.cross(q - p, r - p), n) / nn**2
    u = sub(points, b, c)
    v = sub(a, points, c)
    w = sub(a, b, points)
    return (plane < tol) & (u >= -tol) & (v >= -tol) & (w >= -tol)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def load_mesh(path) -> TriangleMesh:
    """Load ASCII/binary STL or OBJ (triangles only). Name = file stem."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        v, t = _read_stl(path.read_bytes())
    elif suffix == ".obj":
        v, t = _read_obj(path.read_text())
    else:
        raise ValueError(f"unsupported mesh format: {suffix}")
    return TriangleMesh(v, t, path.stem)


def _read_stl(data: bytes):
    if len(data) >= 84:
        (n,) = struct.unpack("<I", data[80:84])
        if 84 + 50 * n == len(data):
            rec = np.frombuffer(data[84:], dtype=np.dtype([
                ("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]), count=n)
            verts = rec["v"].astype(float).reshape(-1, 3)
            return verts, np.arange(len(verts)).reshape(-1, 3)
    verts = []
    for line in data.decode("ascii", errors="replace").splitlines():
        parts = line.split()
        if parts and parts[0] == "vertex":
            verts.append([float(x) for x in parts[1:4]])
    verts = np.array(verts, dtype=float).reshape(-1, 3)
    return verts, np.arange(len(verts)).reshape(-1, 3)


def _read_obj(text: str):
    verts, tris = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular OBJ faces are supported")
            tris.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def save_stl(mesh: TriangleMesh, path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        rec = np.zeros(len(mesh), dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]))
        rec["n"] = mesh.normals
        rec["v"] = mesh.corners
        path.write_bytes(b"\0" * 80 + struct.pack("<I", len(mesh)) + rec.tobytes())
        return
    lines = [f"solid {mesh.name}"]
    for n, tri in zip(mesh.normals, mesh.corners):
        lines.append(f"  facet normal {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}")
        lines.append("    outer loop")
        for v in tri:
            lines.append(f"      vertex {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {mesh.name}")
    path.write_text("\n".join(lines) + "\n")


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
