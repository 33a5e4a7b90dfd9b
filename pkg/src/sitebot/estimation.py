"""Moving-horizon state estimation for the mobile base.

Knots sit on a fixed time grid. Each knot carries position, orientation and
world-frame velocity; gyroscope and accelerometer biases are static over the
window. Three kinds of error terms tie them together:

* pose updates (from ICP) anchor single knots,
* wheel odometry constrains the relative pose of consecutive knots,
* preintegrated IMU samples constrain relative pose and velocity.

Rotations are perturbed on the left, ``R <- Exp(d) R``. When the window is
full the oldest knot is dropped and replaced by a Gaussian prior on its
successor, taken from the marginal covariance of the last solve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import (
    Pose, left_jacobian_inv, right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log,
)

KINDS = ("pose_update", "wheel_odometry", "imu")
STATIONARY_WHEEL_SPEED = 1e-3


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseUpdate:
    pose: Pose
    sigma_position: Optional[float] = None
    sigma_rotation: Optional[float] = None


@dataclass(frozen=True)
class WheelSpeeds:
    """Mean wheel angular velocities over the ``dt`` seconds ending at the
    measurement timestamp."""

    left: float
    right: float
    dt: float


@dataclass(frozen=True, eq=False)
class ImuSample:
    """Body-frame angular velocity and specific force, held from the
    measurement timestamp until the next sample."""

    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


_PAYLOAD = {"pose_update": PoseUpdate, "wheel_odometry": WheelSpeeds, "imu": ImuSample}


@dataclass(frozen=True, eq=False)
class Measurement:
    timestamp: float
    kind: str
    payload: object

    def __post_init__(self):
        if self.kind not in _PAYLOAD:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not isinstance(self.payload, _PAYLOAD[self.kind]):
            raise TypeError(f"{self.kind} needs a {_PAYLOAD[self.kind].__name__} payload")
        if self.kind == "pose_update":
            for s in (self.payload.sigma_position, self.payload.sigma_rotation):
                if s is not None and s <= 0:
                    raise ValueError("noise std must be positive")
        if self.kind == "wheel_odometry" and self.payload.dt <= 0:
            raise ValueError("wheel odometry interval must be positive")

    @classmethod
    def pose(cls, t, pose: Pose, sigma_position=None, sigma_rotation=None):
        return cls(float(t), "pose_update", PoseUpdate(pose, sigma_position, sigma_rotation))

    @classmethod
    def wheels(cls, t, left, right, dt):
        return cls(float(t), "wheel_odometry", WheelSpeeds(float(left), float(right), float(dt)))

    @classmethod
    def imu(cls, t, gyro, accel):
        return cls(float(t), "imu", ImuSample(gyro, accel))

    def key(self):
        """Identity used to discard duplicate deliveries."""
        p = self.payload
        if self.kind == "pose_update":
            data = (p.pose.position.tobytes(), p.pose.orientation.tobytes(),
                    p.sigma_position, p.sigma_rotation)
        elif self.kind == "wheel_odometry":
            data = (p.left, p.right, p.dt)
        else:
            data = (p.gyro.tobytes(), p.accel.tobytes())
        return (self.kind, self.timestamp, data)

    def to_record(self) -> dict:
        p = self.payload
        rec = {"t": self.timestamp, "kind": self.kind}
        if self.kind == "pose_update":
            rec.update(position=p.pose.position.tolist(), orientation=p.pose.orientation.tolist(),
                       sigma_position=p.sigma_position, sigma_rotation=p.sigma_rotation)
        elif self.kind == "wheel_odometry":
            rec.update(left=p.left, right=p.right, dt=p.dt)
        else:
            rec.update(gyro=p.gyro.tolist(), accel=p.accel.tolist())
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Measurement":
        kind = rec["kind"]
        if kind == "pose_update":
            pose = Pose.__new__(Pose)
            # bypass re-normalization so replay is bit-exact
            object.__setattr__(pose, "position", _ro(rec["position"]))
            object.__setattr__(pose, "orientation", _ro(rec["orientation"]))
            return cls.pose(rec["t"], pose, rec.get("sigma_position"), rec.get("sigma_rotation"))
        if kind == "wheel_odometry":
            return cls.wheels(rec["t"], rec["left"], rec["right"], rec["dt"])
        return cls.imu(rec["t"], rec["gyro"], rec["accel"])


def _ro(values):
    a = np.array(values, dtype=float)
    a.setflags(write=False)
    return a


def write_measurement_log(path, measurements: Iterable[Measurement], append: bool = False):
    with open(path, "a" if append else "w") as fh:
        for m in measurements:
            fh.write(json.dumps(m.to_record()) + "\n")


def read_measurement_log(path) -> list:
    with open(path) as fh:
        return [Measurement.from_record(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MheConfig:
    window: int = 10
    knot_dt: float = 0.1
    pose_sigma_position: float = 0.03
    pose_sigma_rotation: float = math.radians(1.0)
    odom_moving_sigma: tuple = (0.01, 0.01)          # per knot interval (m, rad)
    odom_stationary_sigma: tuple = (1e-4, 1e-4)
    gyro_noise_density: float = 1e-3                 # rad/s/sqrt(Hz)
    accel_noise_density: float = 1e-2                # m/s^2/sqrt(Hz)
    gyro_bias_prior: float = 0.05
    accel_bias_prior: float = 0.5
    velocity_prior: float = 100.0
    gravity: tuple = (0.0, 0.0, -9.81)
    wheel_radius: float = 0.1
    track_width: float = 0.5
    max_iterations: int = 15
    max_imu_gap: float = 0.05

    def __post_init__(self):
        stds = [self.pose_sigma_position, self.pose_sigma_rotation, *self.odom_moving_sigma,
                *self.odom_stationary_sigma, self.gyro_noise_density, self.accel_noise_density,
                self.gyro_bias_prior, self.accel_bias_prior, self.velocity_prior]
        if min(stds) <= 0:
            raise ValueError("all noise stds must be positive")
        if self.window < 1 or self.knot_dt <= 0:
            raise ValueError("window >= 1 and knot_dt > 0 required")
        if any(s >= m for s, m in zip(self.odom_stationary_sigma, self.odom_moving_sigma)):
            raise ValueError("stationary odometry std must be below the moving std")

    @property
    def g(self):
        return np.asarray(self.gravity, dtype=float)


@dataclass(frozen=True, eq=False)
class Knot:
    t: float
    position: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray

    @property
    def pose(self) -> Pose:
        return Pose.from_rotation(self.position, self.rotation)


@dataclass(frozen=True, eq=False)
class EstimatorState:
    knots: tuple
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    rank_deficient: bool = False
    iterations: int = 0
    cost: float = 0.0

    def __post_init__(self):
        ts = [k.t for k in self.knots]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("knot timestamps must be strictly increasing")

    @property
    def latest(self) -> Knot:
        return self.knots[-1]

    @property
    def times(self):
        return np.array([k.t for k in self.knots])


# ---------------------------------------------------------------------------
# Kinematic models
# ---------------------------------------------------------------------------

def wheel_twist(left, right, wheel_radius, track_width):
    v = wheel_radius * (left + right) / 2.0
    w = wheel_radius * (right - left) / track_width
    return v, w


def _arc(v, w, dt):
    th = w * dt
    if abs(th) < 1e-6:
        s = dt * (1 - th * th / 6.0)
        c = dt * (th / 2.0 - th ** 3 / 24.0)
    else:
        s = math.sin(th) / w
        c = (1 - math.cos(th)) / w
    return v * s, v * c, th


def differential_drive_predict(pose: Pose, left, right, wheel_radius, track_width, dt) -> Pose:
    """Exact constant-twist arc of a differential drive over ``dt``.

    The motion is planar in the body x-y plane of ``pose``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, w = wheel_twist(left, right, wheel_radius, track_width)
    dx, dy, th = _arc(v, w, dt)
    return pose @ Pose.from_planar(dx, dy, th)


def _odometry_delta(samples, cfg: MheConfig):
    """Relative body-frame motion from a run of wheel samples."""
    x = y = th = 0.0
    stationary = True
    for s in samples:
        v, w = wheel_twist(s.left, s.right, cfg.wheel_radius, cfg.track_width)
        dx, dy, dth = _arc(v, w, s.dt)
        c, sn = math.cos(th), math.sin(th)
        x += c * dx - sn * dy
        y += sn * dx + c * dy
        th += dth
        if abs(s.left) >= STATIONARY_WHEEL_SPEED or abs(s.right) >= STATIONARY_WHEEL_SPEED:
            stationary = False
    return np.array([x, y, 0.0]), so3_exp([0.0, 0.0, th]), stationary


class ImuPreintegration:
    """Relative rotation, velocity and position increments between two knots,
    with first-order bias Jacobians and propagated covariance."""

    def __init__(self, gyro_bias, accel_bias, gyro_nd=1e-3, accel_nd=1e-2):
        self.bg = np.array(gyro_bias, dtype=float)
        self.ba = np.array(accel_bias, dtype=float)
        self.gyro_nd = gyro_nd
        self.accel_nd = accel_nd
        self.dt = 0.0
        self.dR = np.eye(3)
        self.dv = np.zeros(3)
        self.dp = np.zeros(3)
        self.dR_dbg = np.zeros((3, 3))
        self.dv_dbg = np.zeros((3, 3))
        self.dv_dba = np.zeros((3, 3))
        self.dp_dbg = np.zeros((3, 3))
        self.dp_dba = np.zeros((3, 3))
        self.cov = np.zeros((9, 9))     # order: rotation, velocity, position

    def integrate(self, gyro, accel, dt):
        if dt <= 0:
            return
        w = np.asarray(gyro) - self.bg
        a = np.asarray(accel) - self.ba
        dR = self.dR
        Ra = dR @ a
        ax = skew(a)
        step = so3_exp(w * dt)
        Jr = right_jacobian(w * dt)
        A = np.eye(9)
        A[0:3, 0:3] = step.T
        A[3:6, 0:3] = -dR @ ax * dt
        A[6:9, 0:3] = -0.5 * dR @ ax * dt * dt
        A[6:9, 3:6] = np.eye(3) * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * dt
        B[3:6, 3:6] = dR * dt
        B[6:9, 3:6] = 0.5 * dR * dt * dt
        Q = np.diag([self.gyro_nd ** 2 / dt] * 3 + [self.accel_nd ** 2 / dt] * 3)
        self.cov = A @ self.cov @ A.T + B @ Q @ B.T

        self.dp_dba = self.dp_dba + self.dv_dba * dt - 0.5 * dR * dt * dt
        self.dp_dbg = self.dp_dbg + self.dv_dbg * dt - 0.5 * dR @ ax @ self.dR_dbg * dt * dt
        self.dv_dba = self.dv_dba - dR * dt
        self.dv_dbg = self.dv_dbg - dR @ ax @ self.dR_dbg * dt
        self.dR_dbg = step.T @ self.dR_dbg - Jr * dt

        self.dp = self.dp + self.dv * dt + 0.5 * Ra * dt * dt
        self.dv = self.dv + Ra * dt
        self.dR = dR @ step
        self.dt += dt

    def corrected(self, bg, ba):
        dbg = np.asarray(bg) - self.bg
        dba = np.asarray(ba) - self.ba
        dR = self.dR @ so3_exp(self.dR_dbg @ dbg)
        dv = self.dv + self.dv_dbg @ dbg + self.dv_dba @ dba
        dp = self.dp + self.dp_dbg @ dbg + self.dp_dba @ dba
        return dR, dv, dp


def _imu_segments(samples: Sequence[Measurement], t0, t1):
    """(gyro, accel, dt) pieces covering [t0, t1) with zero-order hold."""
    out = []
    for k, m in enumerate(samples):
        start = max(m.timestamp, t0)
        nxt = samples[k + 1].timestamp if k + 1 < len(samples) else t1
        end = min(nxt, t1)
        if end > start:
            out.append((m.payload.gyro, m.payload.accel, end - start))
    return out


# ---------------------------------------------------------------------------
# Error terms
# ---------------------------------------------------------------------------
# Each factor returns (e, {block: J}) where a block is ("k", knot_id) with 9
# columns [dp, dphi, dv] or "bias" with 6 columns [dbg, dba].

def _sqrt_info(sigmas):
    return np.diag(1.0 / np.asarray(sigmas, dtype=float))


def _chol_info(cov):
    cov = 0.5 * (cov + cov.T) + np.eye(len(cov)) * 1e-15
    info = np.linalg.inv(cov)
    L = np.linalg.cholesky(0.5 * (info + info.T))
    return L.T


@dataclass(eq=False)
class PoseFactor:
    knot: int
    position: np.ndarray
    rotation: np.ndarray
    W: np.ndarray

    def evaluate(self, X):
        k = X.knots[self.knot]
        phi = so3_log(self.rotation @ k.rotation.T)
        e = np.concatenate([self.position - k.position, phi])
        J = np.zeros((6, 9))
        J[0:3, 0:3] = -np.eye(3)
        J[3:6, 3:6] = -right_jacobian_inv(phi)
        return self.W @ e, {("k", self.knot): self.W @ J}


@dataclass(eq=False)
class OdometryFactor:
    i: int
    j: int
    d_pred: np.ndarray
    R_pred: np.ndarray
    W: np.ndarray
    stationary: bool = False

    def evaluate(self, X):
        a, b = X.knots[self.i], X.knots[self.j]
        RiT = a.rotation.T
        dp = b.position - a.position
        phi = so3_log(self.R_pred.T @ RiT @ b.rotation)
        e = np.concatenate([RiT @ dp - self.d_pred, phi])
        Jli = left_jacobian_inv(phi) @ self.R_pred.T @ RiT
        Ji = np.zeros((6, 9))
        Jj = np.zeros((6, 9))
        Ji[0:3, 0:3] = -RiT
        Ji[0:3, 3:6] = RiT @ skew(dp)
        Ji[3:6, 3:6] = -Jli
        Jj[0:3, 0:3] = RiT
        Jj[3:6, 3:6] = Jli
        return self.W @ e, {("k", self.i): self.W @ Ji, ("k", self.j): self.W @ Jj}


@dataclass(eq=False)
class ImuFactor:
    i: int
    j: int
    pre: ImuPreintegration
    g: np.ndarray
    W: np.ndarray = None

    def __post_init__(self):
        if self.W is None:
            self.W = _chol_info(self.pre.cov)

    def evaluate(self, X):
        a, b = X.knots[self.i], X.knots[self.j]
        pre, g, T = self.pre, self.g, self.pre.dt
        dR, dv, dp = pre.corrected(X.bg, X.ba)
        RiT = a.rotation.T
        phi = so3_log(dR.T @ RiT @ b.rotation)
        Dv = b.velocity - a.velocity - g * T
        Dp = b.position - a.position - a.velocity * T - 0.5 * g * T * T
        e = np.concatenate([phi, RiT @ Dv - dv, RiT @ Dp - dp])
        Jli = left_jacobian_inv(phi)
        M = Jli @ dR.T @ RiT
        Ji = np.zeros((9, 9))
        Jj = np.zeros((9, 9))
        Jb = np.zeros((9, 6))
        Ji[0:3, 3:6] = -M
        Jj[0:3, 3:6] = M
        Ji[3:6, 3:6] = RiT @ skew(Dv)
        Ji[3:6, 6:9] = -RiT
        Jj[3:6, 6:9] = RiT
        Ji[6:9, 0:3] = -RiT
        Ji[6:9, 3:6] = RiT @ skew(Dp)
        Ji[6:9, 6:9] = -RiT * T
        Jj[6:9, 0:3] = RiT
        dbg = X.bg - pre.bg
        Jb[0:3, 0:3] = -Jli @ right_jacobian(pre.dR_dbg @ dbg) @ pre.dR_dbg
        Jb[3:6, 0:3] = -pre.dv_dbg
        Jb[3:6, 3:6] = -pre.dv_dba
        Jb[6:9, 0:3] = -pre.dp_dbg
        Jb[6:9, 3:6] = -pre.dp_dba
        W = self.W
        return W @ e, {("k", self.i): W @ Ji, ("k", self.j): W @ Jj, "bias": W @ Jb}


@dataclass(eq=False)
class PriorFactor:
    """Gaussian prior on one knot (optionally with the biases)."""

    knot: int
    position: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    W: np.ndarray           # 15x15 over [p, phi, v, bg, ba]

    def evaluate(self, X):
        k = X.knots[self.knot]
        phi = so3_log(k.rotation @ self.rotation.T)
        e = np.concatenate([k.position - self.position, phi, k.velocity - self.velocity,
                            X.bg - self.bg, X.ba - self.ba])
        Jk = np.zeros((15, 9))
        Jk[0:3, 0:3] = np.eye(3)
        Jk[3:6, 3:6] = left_jacobian_inv(phi)
        Jk[6:9, 6:9] = np.eye(3)
        Jb = np.zeros((15, 6))
        Jb[9:15, 0:6] = np.eye(6)
        return self.W @ e, {("k", self.knot): self.W @ Jk, "bias": self.W @ Jb}


@dataclass(eq=False)
class WeakPrior:
    """Regularizer on quantities a pose anchor alone cannot fix (velocities,
    biases); far weaker than any real measurement."""

    knots: tuple
    sigma_v: float
    sigma_bg: float
    sigma_ba: float

    def evaluate(self, X):
        W = np.diag([1 / self.sigma_bg] * 3 + [1 / self.sigma_ba] * 3)
        e = [W @ np.concatenate([X.bg, X.ba])]
        blocks = {"bias": np.vstack([W, np.zeros((3 * len(self.knots), 6))])}
        for n, kid in enumerate(self.knots):
            e.append(X.knots[kid].velocity / self.sigma_v)
            J = np.zeros((6 + 3 * len(self.knots), 9))
            J[6 + 3 * n:9 + 3 * n, 6:9] = np.eye(3) / self.sigma_v
            blocks[("k", kid)] = J
        return np.concatenate(e), blocks


# ---------------------------------------------------------------------------
# Problem container
# ---------------------------------------------------------------------------

@dataclass
class _Vars:
    knots: dict
    bg: np.ndarray
    ba: np.ndarray

    def copy(self):
        return _Vars(dict(self.knots), self.bg.copy(), self.ba.copy())

    def retract(self, order, delta):
        out = self.copy()
        for n, kid in enumerate(order):
            k = out.knots[kid]
            d = delta[9 * n:9 * n + 9]
            out.knots[kid] = Knot(k.t, k.position + d[0:3], so3_exp(d[3:6]) @ k.rotation,
                                  k.velocity + d[6:9])
        off = 9 * len(order)
        out.bg = self.bg + delta[off:off + 3]
        out.ba = self.ba + delta[off + 3:off + 6]
        return out


def _linearize(factors, X: _Vars, order):
    col = {("k", kid): 9 * n for n, kid in enumerate(order)}
    col["bias"] = 9 * len(order)
    nvar = 9 * len(order) + 6
    rows_e, rows_J = [], []
    for f in factors:
        e, blocks = f.evaluate(X)
        J = np.zeros((len(e), nvar))
        for b, Jb in blocks.items():
            c = col[b]
            J[:, c:c + Jb.shape[1]] = Jb
        rows_e.append(e)
        rows_J.append(J)
    return np.concatenate(rows_e), np.vstack(rows_J)


def _pose_schur_min_eig(H, nknots):
    idx_pose = np.concatenate([np.arange(9 * k, 9 * k + 6) for k in range(nknots)])
    idx_rest = np.setdiff1d(np.arange(len(H)), idx_pose)
    Hpp = H[np.ix_(idx_pose, idx_pose)]
    Hpr = H[np.ix_(idx_pose, idx_rest)]
    Hrr = H[np.ix_(idx_rest, idx_rest)]
    S = Hpp - Hpr @ np.linalg.solve(Hrr, Hpr.T)
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


# ---------------------------------------------------------------------------
# Estimator
# ---------------------------------------------------------------------------

class MovingHorizonEstimator:
    """Sliding-window estimator. Feed measurements with :meth:`add` and call
    :meth:`update` with the current time to create knots and solve."""

    def __init__(self, cfg: Optional[MheConfig] = None, t0: float = 0.0):
        self.cfg = cfg or MheConfig()
        self.t0 = float(t0)
        self._seen = set()
        self.pose_updates: list = []
        self.wheels: list = []
        self.imu: list = []
        self.X = _Vars({}, np.zeros(3), np.zeros(3))
        self.factors_between: dict = {}
        self.prior: Optional[PriorFactor] = None
        self.state: Optional[EstimatorState] = None
        self.flags = {"rank_deficient": 0, "solves": 0}

    # -- measurement intake ------------------------------------------------
    def add(self, m: Measurement) -> bool:
        key = m.key()
        if key in self._seen:
            return False
        self._seen.add(key)
        {"pose_update": self.pose_updates, "wheel_odometry": self.wheels,
         "imu": self.imu}[m.kind].append(m)
        return True

    def extend(self, ms: Iterable[Measurement]):
        for m in ms:
            self.add(m)

    def knot_time(self, kid: int) -> float:
        return self.t0 + kid * self.cfg.knot_dt

    def _knot_index(self, t: float) -> int:
        return int(math.floor((t - self.t0) / self.cfg.knot_dt + 1e-9))

    # -- knot management -----------------------------------------------------
    def _samples(self, lst, t0, t1, include_end):
        if include_end:
            return [m for m in lst if t0 < m.timestamp <= t1 + 1e-12]
        return [m for m in lst if t0 - 1e-12 <= m.timestamp < t1]

    def _imu_for(self, t0, t1):
        before = [m for m in self.imu if m.timestamp < t0]
        inside = [m for m in self.imu if t0 <= m.timestamp < t1]
        seq = ([before[-1]] if before else []) + inside
        return sorted(seq, key=lambda m: m.timestamp)

    def _new_knot(self, kid: int):
        cfg = self.cfg
        t = self.knot_time(kid)
        if not self.X.knots:
            seed = self._seed_pose(t)
            self.X.knots[kid] = Knot(t, seed.position.copy(), seed.rotation.copy(), np.zeros(3))
            return
        prev_id = max(self.X.knots)
        prev = self.X.knots[prev_id]
        samples = self._imu_for(prev.t, t)
        factors = []
        if samples:
            pre = ImuPreintegration(self.X.bg, self.X.ba, cfg.gyro_noise_density,
                                    cfg.accel_noise_density)
            for gyro, accel, dt in _imu_segments(samples, prev.t, t):
                pre.integrate(gyro, accel, dt)
            if pre.dt > 0:
                factors.append(ImuFactor(prev_id, kid, pre, cfg.g))
        wheels = sorted(self._samples(self.wheels, prev.t, t, True), key=lambda m: m.timestamp)
        if wheels:
            d, Rp, stationary = _odometry_delta([m.payload for m in wheels], cfg)
            sp, sr = cfg.odom_stationary_sigma if stationary else cfg.odom_moving_sigma
            factors.append(OdometryFactor(prev_id, kid, d, Rp, _sqrt_info([sp] * 3 + [sr] * 3),
                                          stationary))
        # initial guess: IMU dead reckoning, else odometry, else hold
        imu_f = next((f for f in factors if isinstance(f, ImuFactor)), None)
        odo_f = next((f for f in factors if isinstance(f, OdometryFactor)), None)
        if imu_f is not None:
            dR, dv, dp = imu_f.pre.corrected(self.X.bg, self.X.ba)
            T = imu_f.pre.dt
            g = cfg.g
            R = prev.rotation @ dR
            v = prev.velocity + g * T + prev.rotation @ dv
            p = prev.position + prev.velocity * T + 0.5 * g * T * T + prev.rotation @ dp
            knot = Knot(t, p, R, v)
        elif odo_f is not None:
            knot = Knot(t, prev.position + prev.rotation @ odo_f.d_pred,
                        prev.rotation @ odo_f.R_pred, prev.velocity.copy())
        else:
            knot = Knot(t, prev.position.copy(), prev.rotation.copy(), prev.velocity.copy())
        self.X.knots[kid] = knot
        self.factors_between[kid] = factors

    def _seed_pose(self, t):
        if self.pose_updates:
            m = min(self.pose_updates, key=lambda m: abs(m.timestamp - t))
            return m.payload.pose
        return Pose.identity()

    def _pose_factors(self):
        cfg = self.cfg
        out = []
        half = 0.5 * cfg.knot_dt
        for m in self.pose_updates:
            kid = int(round((m.timestamp - self.t0) / cfg.knot_dt))
            if kid not in self.X.knots or abs(self.knot_time(kid) - m.timestamp) > half + 1e-9:
                continue
            p = m.payload
            sp = p.sigma_position or cfg.pose_sigma_position
            sr = p.sigma_rotation or cfg.pose_sigma_rotation
            out.append(PoseFactor(kid, p.pose.position, p.pose.rotation,
                                  _sqrt_info([sp] * 3 + [sr] * 3)))
        return out

    def _factors(self):
        fs = self._pose_factors()
        order = sorted(self.X.knots)
        for kid in order:
            fs.extend(self.factors_between.get(kid, []))
        if self.prior is not None:
            fs.append(self.prior)
        cfg = self.cfg
        fs.append(WeakPrior(tuple(order), cfg.velocity_prior, cfg.gyro_bias_prior,
                            cfg.accel_bias_prior))
        return fs

    def _marginalize(self, H, order):
        """Drop the oldest knot, keep a prior on the next one."""
        drop, keep = order[0], order[1]
        cov = np.linalg.inv(H)
        idx = np.r_[9:18, 9 * len(order):9 * len(order) + 6]
        block = cov[np.ix_(idx, idx)]
        k = self.X.knots[keep]
        self.prior = PriorFactor(keep, k.position.copy(), k.rotation.copy(), k.velocity.copy(),
                                 self.X.bg.copy(), self.X.ba.copy(), _chol_info(block))
        del self.X.knots[drop]
        self.factors_between.pop(keep, None)
        self.factors_between.pop(drop, None)
        # raw samples before the new first knot are no longer needed (one
        # IMU sample is kept for its zero-order hold)
        t_keep = k.t - 1e-9
        self.pose_updates = [m for m in self.pose_updates
                             if m.timestamp >= t_keep - self.cfg.knot_dt]
        self.wheels = [m for m in self.wheels if m.timestamp > t_keep]
        older = [m for m in self.imu if m.timestamp <= t_keep]
        self.imu = older[-1:] + [m for m in self.imu if m.timestamp > t_keep]

    # -- solving ---------------------------------------------------------------
    def update(self, t_now: float) -> EstimatorState:
        """Create knots up to ``t_now`` and solve the window."""
        last = self._knot_index(t_now)
        if not self.X.knots:
            start = self._knot_index(min([m.timestamp for m in self.pose_updates] or [t_now]))
            self._new_knot(start)
        nxt = max(self.X.knots) + 1
        for kid in range(nxt, last + 1):
            self._new_knot(kid)
        return self.solve()

    def solve(self) -> EstimatorState:
        cfg = self.cfg
        # windows beyond n: marginalize using the previous solve's information
        while len(self.X.knots) > cfg.window:
            order = sorted(self.X.knots)
            factors = self._factors()
            _, J = _linearize(factors, self.X, order)
            self._marginalize(J.T @ J, order)
        order = sorted(self.X.knots)
        factors = self._factors()
        X = self.X
        e, J = _linearize(factors, X, order)
        H = J.T @ J
        cost = float(e @ e)
        self.flags["solves"] += 1
        if _pose_schur_min_eig(H, len(order)) < 1e-6:
            self.flags["rank_deficient"] += 1
            held = self.state or self._snapshot(X, order, 0, cost)
            self.state = replace(held, rank_deficient=True)
            return self.state
        lam = 1e-6
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            g = J.T @ e
            D = np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = -np.linalg.solve(H + lam * D, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            Xn = X.retract(order, delta)
            en, Jn = _linearize(factors, Xn, order)
            cn = float(en @ en)
            if cn <= cost:
                stalled = cost - cn <= 1e-10 * cost
                X, e, J, cost = Xn, en, Jn, cn
                H = J.T @ J
                lam = max(lam / 10, 1e-12)
                if np.max(np.abs(delta)) < 1e-9 or stalled:
                    break
            else:
                lam *= 10
                if lam > 1e8:
                    break
        self.X = X
        self.state = self._snapshot(X, order, it, cost)
        return self.state

    def _snapshot(self, X, order, it, cost):
        knots = tuple(Knot(k.t, _ro(k.position), _ro(k.rotation), _ro(k.velocity))
                      for k in (X.knots[i] for i in order))
        return EstimatorState(knots, _ro(X.bg), _ro(X.ba), False, it, cost)

    def propagate(self, t_target: float):
        return propagate_with_imu(self.state, [m for m in self.imu
                                               if m.timestamp >= self.state.latest.t - 1e-12],
                                  t_target, self.cfg)


def mhe_solve(measurements: Iterable[Measurement], cfg: Optional[MheConfig] = None,
              t_end: Optional[float] = None, t0: float = 0.0,
              estimator: Optional[MovingHorizonEstimator] = None) -> EstimatorState:
    """Run the estimator over a measurement buffer up to ``t_end``.

    With ``estimator`` given (holding the prior window of an earlier call)
    the buffer is appended to it; otherwise a fresh window starts at ``t0``.
    Knots are solved one at a time in time order, as they would be online.
    """
    ms = sorted(measurements, key=lambda m: m.timestamp)
    mhe = estimator or MovingHorizonEstimator(cfg, t0)
    if t_end is None:
        t_end = ms[-1].timestamp if ms else mhe.t0
    cfg = mhe.cfg
    n_end = mhe._knot_index(t_end)
    k = 0
    start = mhe._knot_index(ms[0].timestamp) if ms and not mhe.X.knots else None
    first = start if start is not None else (max(mhe.X.knots) + 1 if mhe.X.knots else 0)
    state = mhe.state
    for kid in range(first, n_end + 1):
        t = mhe.knot_time(kid)
        while k < len(ms) and ms[k].timestamp <= t + 0.5 * cfg.knot_dt - 1e-12 and (
                ms[k].kind == "pose_update" or ms[k].timestamp <= t + 1e-12):
            mhe.add(ms[k])
            k += 1
        state = mhe.update(t)
    for m in ms[k:]:
        mhe.add(m)
    return state


def propagate_with_imu(state: EstimatorState, imu: Sequence[Measurement], t_target: float,
                       cfg: Optional[MheConfig] = None):
    """Strapdown integration from the newest knot to ``t_target``.

    Returns ``(pose, velocity, stale)``. ``stale`` is set when the IMU stream
    leaves a gap longer than ``cfg.max_imu_gap`` before ``t_target``.
    """
    cfg = cfg or MheConfig()
    k = state.latest
    if t_target < k.t - 1e-12:
        raise ValueError("target time precedes the newest knot")
    samples = sorted((m for m in imu if m.timestamp < t_target), key=lambda m: m.timestamp)
    before = [m for m in samples if m.timestamp <= k.t]
    after = [m for m in samples if m.timestamp > k.t]
    seq = before[-1:] + after
    marks = ([] if before else [k.t]) + [max(m.timestamp, k.t) for m in seq] + [t_target]
    stale = bool(np.any(np.diff(marks) > cfg.max_imu_gap))
    R, v, p = k.rotation.copy(), k.velocity.copy(), k.position.copy()
    g = cfg.g
    for gyro, accel, dt in _imu_segments(seq, k.t, t_target):
        a = R @ (accel - state.accel_bias) + g
        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        R = R @ so3_exp((gyro - state.gyro_bias) * dt)
    return Pose.from_rotation(p, R), v, stale


def error_term(state: EstimatorState, z, cfg: Optional[MheConfig] = None, jacobians=False):
    """Whitened error of measurement(s) ``z`` against the knots of ``state``.

    A pose update is matched to its knot. Wheel or IMU samples (a single
    measurement or a list) are grouped into the knot pair that brackets them.
    With ``jacobians`` the per-block Jacobians are returned as well.
    """
    cfg = cfg or MheConfig()
    zs = [z] if isinstance(z, Measurement) else list(z)
    if not zs:
        raise ValueError("no measurement given")
    kinds = {m.kind for m in zs}
    if len(kinds) != 1:
        raise ValueError("measurements must share one kind")
    kind = kinds.pop()
    times = state.times
    tmin, tmax = times[0], times[-1]
    for m in zs:
        lo = m.timestamp - (m.payload.dt if kind == "wheel_odometry" else 0.0)
        if lo < tmin - 0.5 * cfg.knot_dt - 1e-9 or m.timestamp > tmax + 0.5 * cfg.knot_dt + 1e-9:
            raise ValueError(f"measurement at t={m.timestamp} lies outside the window")
    X = _Vars({i: k for i, k in enumerate(state.knots)},
              np.array(state.gyro_bias), np.array(state.accel_bias))
    if kind == "pose_update":
        if len(zs) != 1:
            raise ValueError("one pose update at a time")
        m = zs[0]
        kid = int(np.argmin(np.abs(times - m.timestamp)))
        p = m.payload
        W = _sqrt_info([p.sigma_position or cfg.pose_sigma_position] * 3
                       + [p.sigma_rotation or cfg.pose_sigma_rotation] * 3)
        f = PoseFactor(kid, p.pose.position, p.pose.rotation, W)
    else:
        t_first = min(m.timestamp for m in zs)
        if kind == "imu":
            i = int(np.searchsorted(times, t_first, side="right")) - 1
        else:
            i = int(np.searchsorted(times, t_first - 1e-12, side="left")) - 1
        i = max(i, 0)
        j = i + 1
        if j >= len(times):
            raise ValueError("measurement is not bracketed by two knots")
        if kind == "wheel_odometry":
            d, Rp, stationary = _odometry_delta([m.payload for m in zs], cfg)
            sp, sr = cfg.odom_stationary_sigma if stationary else cfg.odom_moving_sigma
            f = OdometryFactor(i, j, d, Rp, _sqrt_info([sp] * 3 + [sr] * 3), stationary)
        else:
            pre = ImuPreintegration(state.gyro_bias, state.accel_bias, cfg.gyro_noise_density,
                                    cfg.accel_noise_density)
            for gyro, accel, dt in _imu_segments(sorted(zs, key=lambda m: m.timestamp),
                                                 times[i], times[j]):
                pre.integrate(gyro, accel, dt)
            f = ImuFactor(i, j, pre, cfg.g)
    e, blocks = f.evaluate(X)
    return (e, blocks, f, X) if jacobians else e
