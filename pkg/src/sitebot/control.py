"""Whole-body motion generation for a differential-drive base with a 6R arm.

The state is ``x = (x_b, y_b, theta_b, q_0..q_5)`` and the input
``u = (v_b, theta_dot_b, q_dot_0..q_dot_5)``. The MPC minimizes a tracking
cost over a one-second horizon with a condensed Gauss-Newton scheme: inputs
are the decision variables and states follow from exact rollouts, with
sensitivities propagated alongside.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .geometry import (
    Pose, left_jacobian_inv, quat_angle, quat_slerp, right_jacobian_inv, so3_log, wrap_angle,
)

NX = 9
NU = 8


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RobotState9:
    x: float
    y: float
    theta: float
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))
        q = np.array(self.q, dtype=float).reshape(6)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_vector(cls, v) -> "RobotState9":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1], v[2], v[3:9])

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.x, self.y, self.theta], self.q])

    @property
    def base_pose(self) -> Pose:
        return Pose.from_planar(self.x, self.y, self.theta)


@dataclass(frozen=True, eq=False)
class ControlInput9:
    v: float
    omega: float
    qdot: np.ndarray

    def __post_init__(self):
        qd = np.array(self.qdot, dtype=float).reshape(6)
        qd.setflags(write=False)
        object.__setattr__(self, "qdot", qd)

    @classmethod
    def from_vector(cls, u) -> "ControlInput9":
        u = np.asarray(u, dtype=float)
        return cls(u[0], u[1], u[2:8])

    @classmethod
    def zero(cls) -> "ControlInput9":
        return cls(0.0, 0.0, np.zeros(6))

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.v, self.omega], self.qdot])


# ---------------------------------------------------------------------------
# Kinematic model
# ---------------------------------------------------------------------------

UR5_DH = [  # d, a, alpha (standard DH)
    (0.089159, 0.0, math.pi / 2),
    (0.0, -0.425, 0.0),
    (0.0, -0.39225, 0.0),
    (0.10915, 0.0, math.pi / 2),
    (0.09465, 0.0, -math.pi / 2),
    (0.0823, 0.0, 0.0),
]


@dataclass(frozen=True, eq=False)
class KinematicModel:
    dh: np.ndarray
    mount: Pose
    tool: Pose
    default_joints: np.ndarray
    joint_limits: np.ndarray
    velocity_limits: np.ndarray          # |v|, |omega|, |q_dot_i|
    wheel_radius: float = 0.1
    track_width: float = 0.5
    footprint: tuple = (0.45, 0.3)       # base rectangle half extents (m)

    def __post_init__(self):
        dh = np.array(self.dh, dtype=float).reshape(-1, 3)
        if dh.shape != (6, 3):
            raise ValueError("the arm must have exactly 6 revolute joints")
        for name, val, shape in (("default_joints", self.default_joints, (6,)),
                                 ("joint_limits", self.joint_limits, (6, 2)),
                                 ("velocity_limits", self.velocity_limits, (8,))):
            a = np.array(val, dtype=float).reshape(shape)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        dh.setflags(write=False)
        object.__setattr__(self, "dh", dh)
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint limits must be increasing")
        if self.wheel_radius <= 0 or self.track_width <= 0:
            raise ValueError("wheel geometry must be positive")

    @classmethod
    def default(cls) -> "KinematicModel":
        """UR5-like arm on the front of a differential-drive base.

        The default configuration holds the tool 0.75 m ahead of the base
        centre at 1.0 m height, tool z pointing forward and tool y down.
        """
        return cls(
            dh=UR5_DH,
            mount=Pose.from_rotvec([0.25, 0.0, 0.45], [0.0, 0.0, math.pi]),
            tool=Pose.translation(0.0, 0.0, 0.05),
            default_joints=DEFAULT_JOINTS,
            joint_limits=[(-2 * math.pi, 2 * math.pi)] * 6,
            velocity_limits=[0.6, 0.8] + [1.0] * 6,
        )

    @property
    def lower(self):
        return np.concatenate([[-np.inf] * 3, self.joint_limits[:, 0]])

    @property
    def upper(self):
        return np.concatenate([[np.inf] * 3, self.joint_limits[:, 1]])

    def clamp_joints(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])


# Elbow-up IK solution for the tool pose described in KinematicModel.default.
DEFAULT_JOINTS = np.array([-0.30138729, -1.61466378, 1.27442161, 0.34024216, 1.26940903, math.pi])


def save_model(model: KinematicModel, path) -> None:
    data = {
        "dh": [[float(v) for v in row] for row in model.dh],
        "mount": {"translation": model.mount.position.tolist(),
                  "quaternion": model.mount.orientation.tolist()},
        "tool": {"translation": model.tool.position.tolist(),
                 "quaternion": model.tool.orientation.tolist()},
        "default_joints": model.default_joints.tolist(),
        "joint_limits": model.joint_limits.tolist(),
        "velocity_limits": model.velocity_limits.tolist(),
        "wheel_radius": model.wheel_radius,
        "track_width": model.track_width,
        "footprint": list(model.footprint),
    }
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def load_model(path) -> KinematicModel:
    d = yaml.safe_load(Path(path).read_text())
    return model_from_dict(d)


def model_from_dict(d: dict) -> KinematicModel:
    base = KinematicModel.default()
    pose = lambda e, dflt: Pose(e["translation"], e["quaternion"]) if e else dflt
    return KinematicModel(
        dh=d.get("dh", base.dh),
        mount=pose(d.get("mount"), base.mount),
        tool=pose(d.get("tool"), base.tool),
        default_joints=d.get("default_joints", base.default_joints),
        joint_limits=d.get("joint_limits", base.joint_limits),
        velocity_limits=d.get("velocity_limits", base.velocity_limits),
        wheel_radius=float(d.get("wheel_radius", base.wheel_radius)),
        track_width=float(d.get("track_width", base.track_width)),
        footprint=tuple(d.get("footprint", base.footprint)),
    )


# ---------------------------------------------------------------------------
# Forward kinematics (batched over knots)
# ---------------------------------------------------------------------------

def _dh_batch(theta, d, a, alpha):
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    T = np.zeros(theta.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def _planar_batch(x, y, th):
    c, s = np.cos(th), np.sin(th)
    T = np.zeros(np.shape(x) + (4, 4))
    T[..., 0, 0] = c
    T[..., 0, 1] = -s
    T[..., 1, 0] = s
    T[..., 1, 1] = c
    T[..., 2, 2] = 1.0
    T[..., 3, 3] = 1.0
    T[..., 0, 3] = x
    T[..., 1, 3] = y
    return T


def chain_frames(model: KinematicModel, X, base=None):
    """World frames of the arm for states ``X`` (K, 9).

    Returns ``(frames, ee)``: frames (K, 7, 4, 4) holds the joint frames
    before each joint plus the flange; ee (K, 4, 4) is the tool frame.
    ``base`` optionally overrides the planar base with full 4x4 transforms.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = len(X)
    if base is None:
        Tb = _planar_batch(X[:, 0], X[:, 1], X[:, 2])
    else:
        Tb = np.broadcast_to(np.asarray(base, dtype=float), (K, 4, 4))
    frames = np.empty((K, 7, 4, 4))
    T = Tb @ model.mount.matrix()
    frames[:, 0] = T
    for i in range(6):
        d, a, al = model.dh[i]
        T = T @ _dh_batch(X[:, 3 + i], d, a, al)
        frames[:, i + 1] = T
    ee = T @ model.tool.matrix()
    return frames, ee


def forward_kinematics(model: KinematicModel, state) -> Pose:
    """End-effector pose in the world frame."""
    v = state.vector() if isinstance(state, RobotState9) else np.asarray(state, dtype=float)
    _, ee = chain_frames(model, v[None])
    return Pose.from_matrix(ee[0])


def fk_with_base(model: KinematicModel, base: Pose, q) -> Pose:
    """End-effector pose for an arbitrary 3D base pose (e.g. on a tilted floor)."""
    x = np.concatenate([[0.0, 0.0, 0.0], np.asarray(q, dtype=float)])
    _, ee = chain_frames(model, x[None], base=base.matrix())
    return Pose.from_matrix(ee[0])


def ee_jacobian(model: KinematicModel, X, frames=None, ee=None):
    """World-frame geometric Jacobian (K, 6, 9): rows [linear; angular]."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if frames is None:
        frames, ee = chain_frames(model, X)
    p = ee[:, :3, 3]
    K = len(X)
    J = np.zeros((K, 6, 9))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 0, 2] = -(p[:, 1] - X[:, 1])
    J[:, 1, 2] = p[:, 0] - X[:, 0]
    J[:, 5, 2] = 1.0
    z = frames[:, :6, :3, 2]
    o = frames[:, :6, :3, 3]
    J[:, 0:3, 3:9] = np.cross(z, p[:, None, :] - o).transpose(0, 2, 1)
    J[:, 3:6, 3:9] = z.transpose(0, 2, 1)
    return J


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def _sinc(a):
    return np.where(np.abs(a) < 1e-4, 1 - a * a / 6, np.sin(a) / np.where(a == 0, 1, a))


def _dsinc(a):
    safe = np.where(a == 0, 1, a)
    return np.where(np.abs(a) < 1e-4, -a / 3 + a ** 3 / 30,
                    (a * np.cos(a) - np.sin(a)) / (safe * safe))


def step_state(x, u, dt):
    """Exact constant-input step: base arc plus integrated joint rates."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v, w = u[0], u[1]
    half = 0.5 * w * dt
    psi = x[2] + half
    c = _sinc(half)
    out = x.copy()
    out[0] += v * dt * c * math.cos(psi)
    out[1] += v * dt * c * math.sin(psi)
    out[2] += w * dt
    out[3:9] += u[2:8] * dt
    return out


def step_jacobians(x, u, dt):
    v, w = u[0], u[1]
    half = 0.5 * w * dt
    psi = x[2] + half
    c = float(_sinc(half))
    dc = float(_dsinc(half))
    cp, sp = math.cos(psi), math.sin(psi)
    A = np.eye(NX)
    A[0, 2] = -v * dt * c * sp
    A[1, 2] = v * dt * c * cp
    B = np.zeros((NX, NU))
    B[0, 0] = dt * c * cp
    B[1, 0] = dt * c * sp
    B[0, 1] = v * dt * (dc * 0.5 * dt * cp - c * sp * 0.5 * dt)
    B[1, 1] = v * dt * (dc * 0.5 * dt * sp + c * cp * 0.5 * dt)
    B[2, 1] = dt
    B[3:9, 2:8] = np.eye(6) * dt
    return A, B


def rollout(x0, U, dt):
    X = np.empty((len(U) + 1, NX))
    X[0] = x0
    for k, u in enumerate(U):
        X[k + 1] = step_state(X[k], u, dt)
    return X


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------

Q_D_DEFAULT = 0.01 * np.array([0, 0, 0, 3, 10, 10, 0, 5, 0], dtype=float)


@dataclass(frozen=True, eq=False)
class MpcCostConfig:
    alpha: int = 1
    Q_j: np.ndarray = field(default_factory=lambda: np.ones(NX))
    Q_ee: np.ndarray = field(default_factory=lambda: np.ones(6))
    Q_d: np.ndarray = field(default_factory=lambda: Q_D_DEFAULT.copy())
    R: np.ndarray = field(default_factory=lambda: np.ones(NU))
    Q_ee_terminal: np.ndarray = field(default_factory=lambda: 10.0 * np.ones(6))
    horizon: float = 1.0
    steps: int = 20
    nominal_speed: float = 0.5
    nominal_angular_speed: float = 0.5
    max_iterations: int = 8
    time_budget: float = 0.2

    def __post_init__(self):
        if self.alpha not in (0, 1):
            raise ValueError("alpha must be 0 or 1")
        for name, n in (("Q_j", NX), ("Q_ee", 6), ("Q_d", NX), ("R", NU), ("Q_ee_terminal", 6)):
            a = np.array(getattr(self, name), dtype=float).reshape(n)
            if np.any(a < 0):
                raise ValueError(f"{name} must be non-negative")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.horizon <= 0 or self.steps < 1:
            raise ValueError("horizon must be positive")
        if self.nominal_speed <= 0 or self.nominal_angular_speed <= 0:
            raise ValueError("nominal speeds must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def with_alpha(self, alpha: int) -> "MpcCostConfig":
        from dataclasses import replace
        return replace(self, alpha=alpha)


@dataclass(frozen=True, eq=False)
class MpcReference:
    """Per-knot references: joint-space states (alpha = 0) and/or
    end-effector poses (alpha = 1), plus the default posture."""

    joint: Optional[np.ndarray] = None          # (N+1, 9)
    ee: Optional[tuple] = None                   # N+1 Poses
    posture: Optional[np.ndarray] = None         # (9,)


def _ee_errors(model, X, ee_refs):
    frames, ee = chain_frames(model, X)
    J = ee_jacobian(model, X, frames, ee)
    K = len(X)
    e = np.zeros((K, 6))
    De = np.zeros((K, 6, 9))
    for k in range(K):
        ref = ee_refs[k]
        e[k, :3] = ee[k, :3, 3] - ref.position
        phi = so3_log(ee[k, :3, :3] @ ref.rotation.T)
        e[k, 3:] = phi
        De[k, :3] = J[k, :3]
        De[k, 3:] = left_jacobian_inv(phi) @ J[k, 3:]
    return e, De


def _state_error(X, ref):
    d = X - ref
    d[:, 2] = (d[:, 2] + np.pi) % (2 * np.pi) - np.pi
    return d


def _residuals(model, X, U, refs: MpcReference, cfg: MpcCostConfig, want_jac=True):
    """Stacked residual blocks whose squared norm is the cost.

    Returns (r_x list per knot, dr_x/dx per knot, r_u, dr_u/du scale, r_T, dr_T/dx_N).
    """
    N = len(U)
    dt = cfg.dt
    w = np.full(N + 1, dt)
    w[0] = w[-1] = dt / 2
    sw = np.sqrt(w)
    rx, Dx = [], []
    if cfg.alpha == 0:
        sq = np.sqrt(cfg.Q_j)
        d = _state_error(X, refs.joint)
        for k in range(N + 1):
            rx.append(sw[k] * sq * d[k])
            Dx.append(sw[k] * np.diag(sq))
        rT = np.zeros(0)
        DT = np.zeros((0, NX))
    else:
        e, De = _ee_errors(model, X, refs.ee)
        sqe = np.sqrt(cfg.Q_ee)
        sqd = np.sqrt(cfg.Q_d)
        dp = X - refs.posture
        dp[:, 2] = (dp[:, 2] + np.pi) % (2 * np.pi) - np.pi
        for k in range(N + 1):
            rx.append(sw[k] * np.concatenate([sqe * e[k], sqd * dp[k]]))
            Dx.append(sw[k] * np.vstack([sqe[:, None] * De[k], np.diag(sqd)]))
        sqt = np.sqrt(cfg.Q_ee_terminal)
        rT = sqt * e[N]
        DT = sqt[:, None] * De[N]
    su = math.sqrt(dt) * np.sqrt(cfg.R)
    ru = (U * su).ravel()
    return rx, Dx, ru, su, rT, DT


def mpc_cost(model: KinematicModel, X, U, refs: MpcReference, cfg: MpcCostConfig) -> float:
    """Trapezoid-in-time state cost, rectangle-rule input cost (inputs are
    held over each step) and the terminal end-effector cost."""
    rx, _, ru, _, rT, _ = _residuals(model, np.asarray(X, float), np.asarray(U, float), refs, cfg)
    return float(sum(r @ r for r in rx) + ru @ ru + rT @ rT)


def mpc_cost_gradient(model, X, U, refs, cfg):
    """Gradient of :func:`mpc_cost` with states and inputs independent."""
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    rx, Dx, ru, su, rT, DT = _residuals(model, X, U, refs, cfg)
    gX = np.array([2 * D.T @ r for r, D in zip(rx, Dx)])
    if len(rT):
        gX[-1] += 2 * DT.T @ rT
    gU = 2 * (U * su) * su
    return gX, gU


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------

def reference_interpolate(model, state, target: Pose, cfg: MpcCostConfig, t_offset: float = 0.0):
    """End-effector references along the straight-line / SLERP geodesic to
    ``target``, advanced at most at the nominal linear and angular speeds."""
    start = forward_kinematics(model, state)
    return interpolate_toward(start, target, cfg, t_offset)


def interpolate_toward(start: Pose, target: Pose, cfg: MpcCostConfig, t_offset: float = 0.0):
    d = float(np.linalg.norm(target.position - start.position))
    ang = quat_angle(start.orientation, target.orientation)
    refs = []
    for k in range(cfg.steps + 1):
        t = t_offset + k * cfg.dt
        s = 1.0
        if d > 0:
            s = min(s, cfg.nominal_speed * t / d)
        if ang > 0:
            s = min(s, cfg.nominal_angular_speed * t / ang)
        refs.append(interpolate_pose(start, target, s))
    return tuple(refs)


def quintic(s):
    """Smooth step on [0, 1] with zero velocity and acceleration at both ends."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s * s)


def quintic_rate(s):
    s = np.clip(s, 0.0, 1.0)
    return 30 * s * s * (1 - s) ** 2


def interpolate_pose(start: Pose, end: Pose, s: float) -> Pose:
    s = float(s)
    if s <= 0.0:
        return start
    if s >= 1.0:
        return end
    p = (1 - s) * start.position + s * end.position
    return Pose(p, quat_slerp(start.orientation, end.orientation, s))


def pose_path(start: Pose, end: Pose, duration: float, dt: float):
    """Timed poses from ``start`` to ``end`` under the quintic profile."""
    n = max(1, int(math.ceil(duration / dt)))
    return [(k * duration / n, interpolate_pose(start, end, quintic(k / n))) for k in range(n + 1)]


# ---------------------------------------------------------------------------
# MPC solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MpcSolution:
    inputs: np.ndarray       # (N, 9)
    states: np.ndarray       # (N+1, 9)
    cost: float
    iterations: int
    converged: bool
    stalled: bool = False
    solve_time: float = 0.0

    @property
    def command(self) -> ControlInput9:
        return ControlInput9.from_vector(self.inputs[0])

    def shifted(self, steps: int = 1) -> np.ndarray:
        U = self.inputs
        if steps <= 0:
            return U.copy()
        steps = min(steps, len(U))
        return np.vstack([U[steps:], np.repeat(U[-1:], steps, axis=0)])


def _bounds(model: KinematicModel):
    return -model.velocity_limits, model.velocity_limits


def mpc_solve(model: KinematicModel, x0, refs: MpcReference, cfg: MpcCostConfig,
              warm_start=None) -> MpcSolution:
    """Condensed Gauss-Newton over the input sequence with box-clamped inputs.

    Each iteration linearizes the stacked residuals through the rollout
    sensitivities, solves the damped normal equations, clamps to the velocity
    bounds and backtracks until the true cost decreases.
    """
    t_start = time.perf_counter()
    x0 = np.asarray(x0.vector() if isinstance(x0, RobotState9) else x0, dtype=float)
    N, dt = cfg.steps, cfg.dt
    lo, hi = _bounds(model)
    U = np.zeros((N, NU)) if warm_start is None else np.array(warm_start, dtype=float)
    U = np.clip(U, lo, hi)
    X = rollout(x0, U, dt)
    rx, Dx, ru, su, rT, DT = _residuals(model, X, U, refs, cfg)
    cost = float(sum(r @ r for r in rx) + ru @ ru + rT @ rT)
    converged = stalled = False
    lam = 1e-6
    it = 0
    nvar = N * NU
    for it in range(1, cfg.max_iterations + 1):
        # sensitivities S_k = dx_k / dU
        S = np.zeros((N + 1, NX, nvar))
        for k in range(N):
            A, B = step_jacobians(X[k], U[k], dt)
            S[k + 1] = A @ S[k]
            S[k + 1][:, k * NU:(k + 1) * NU] += B
        rows = [D @ S[k] for k, D in enumerate(Dx)]
        if len(rT):
            rows.append(DT @ S[N])
        Jx = np.vstack(rows)
        r_all = np.concatenate(rx + ([rT] if len(rT) else []))
        H = Jx.T @ Jx
        H[np.diag_indices(nvar)] += np.tile(su * su, N)
        g = Jx.T @ r_all + (U * su * su).ravel()
        gnorm = float(np.max(np.abs(g)))
        if gnorm < 1e-10:
            converged = True
            break
        H[np.diag_indices(nvar)] += lam * (1.0 + np.diag(H))
        step = -np.linalg.solve(H, g).reshape(N, NU)
        accepted = False
        for _ in range(8):
            Un = np.clip(U + step, lo, hi)
            Xn = rollout(x0, Un, dt)
            rxn, Dxn, run, _, rTn, DTn = _residuals(model, Xn, Un, refs, cfg)
            cn = float(sum(r @ r for r in rxn) + run @ run + rTn @ rTn)
            if cn < cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stalled = cost > 1e-16
            converged = not stalled
            break
        rel = (cost - cn) / max(cost, 1e-300)
        U, X, rx, Dx, rT, DT, cost = Un, Xn, rxn, Dxn, rTn, DTn, cn
        if rel < 1e-6 or cost < 1e-18:
            converged = True
            break
        if time.perf_counter() - t_start > cfg.time_budget:
            break
    return MpcSolution(U, X, cost, it, converged, stalled, time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Inverse kinematics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IkResult:
    q: np.ndarray
    success: bool
    residual: float
    iterations: int


def ik_solve(model: KinematicModel, target: Pose, seed, base: Optional[Pose] = None,
             tol: float = 1e-6, max_iterations: int = 200) -> IkResult:
    """Damped least-squares IK with the base held at ``base``.

    The damping adapts: it shrinks after an improving step and grows after a
    rejected one. Success means the pose error norm (m and rad) is below
    ``tol``.
    """
    base = base or Pose.identity()
    Tb = base.matrix()
    q = model.clamp_joints(np.asarray(seed, dtype=float))

    def err(qv):
        x = np.concatenate([[0.0, 0.0, 0.0], qv])[None]
        frames, ee = chain_frames(model, x, base=Tb)
        e = np.concatenate([target.position - ee[0, :3, 3],
                            so3_log(target.rotation @ ee[0, :3, :3].T)])
        return e, frames, ee

    e, frames, ee = err(q)
    n = float(np.linalg.norm(e))
    if n < tol:
        return IkResult(q, True, n, 0)
    lam = 1e-2
    it = 0
    for it in range(1, max_iterations + 1):
        x = np.concatenate([[0.0, 0.0, 0.0], q])[None]
        J = ee_jacobian(model, x, frames, ee)[0][:, 3:9]
        # d Log(R_t R^T) = -Jr^-1(phi) J_w dq
        J[3:] = right_jacobian_inv(e[3:]) @ J[3:]
        A = J @ J.T + lam * lam * np.eye(6)
        dq = J.T @ np.linalg.solve(A, e)
        qn = model.clamp_joints(q + dq)
        en, fn, een = err(qn)
        nn = float(np.linalg.norm(en))
        if nn < n:
            q, e, frames, ee, n = qn, en, fn, een, nn
            lam = max(lam * 0.3, 1e-9)
            if n < tol:
                return IkResult(q, True, n, it)
        else:
            lam *= 4.0
            if lam > 1e6:
                break
    return IkResult(q, n < tol, n, it)


# ---------------------------------------------------------------------------
# Base velocity tracking
# ---------------------------------------------------------------------------

def base_velocity_to_wheels(v, omega, wheel_radius, track_width):
    """Inverse differential-drive model: (left, right) wheel rates in rad/s."""
    if wheel_radius <= 0 or track_width <= 0:
        raise ValueError("wheel geometry must be positive")
    left = (v - omega * track_width / 2) / wheel_radius
    right = (v + omega * track_width / 2) / wheel_radius
    return left, right


class WheelVelocityController:
    """Feed-forward wheel references plus an integral correction on the base
    twist error, clamped for anti-windup."""

    def __init__(self, wheel_radius, track_width, ki=2.0, limit=(0.3, 0.5)):
        self.r = wheel_radius
        self.b = track_width
        self.ki = ki
        self.limit = np.asarray(limit, dtype=float)
        self.integral = np.zeros(2)

    def reset(self):
        self.integral[:] = 0.0

    def correction(self, v_des, w_des, v_meas, w_meas, dt):
        """Update the integral and return it as a (v, omega) offset."""
        self.integral += self.ki * np.array([v_des - v_meas, w_des - w_meas]) * dt
        self.integral = np.clip(self.integral, -self.limit, self.limit)
        return float(self.integral[0]), float(self.integral[1])

    def __call__(self, v_des, w_des, v_meas, w_meas, dt):
        self.correction(v_des, w_des, v_meas, w_meas, dt)
        ff = base_velocity_to_wheels(v_des, w_des, self.r, self.b)
        corr = base_velocity_to_wheels(self.integral[0], self.integral[1], self.r, self.b)
        return ff[0] + corr[0], ff[1] + corr[1]


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------

PLAN_COLUMNS = (["t", "x_b", "y_b", "theta_b"] + [f"q{i}" for i in range(6)]
                + ["v_b", "omega_b"] + [f"qd{i}" for i in range(6)])


def write_plan_csv(path, solution: MpcSolution, t0: float = 0.0, dt: float = 0.05,
                   append: bool = False) -> None:
    new = append and Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not new:
            w.writerow(PLAN_COLUMNS)
        for k, x in enumerate(solution.states[:-1]):
            u = solution.inputs[k]
            w.writerow([repr(t0 + k * dt)] + [repr(float(v)) for v in x]
                       + [repr(float(v)) for v in u])


def read_plan_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]])
