import math

import numpy as np
import pytest

from sitebot.estimation import (
    EstimatorState, ImuPreintegration, Knot, Measurement, MheConfig, MovingHorizonEstimator,
    differential_drive_predict, error_term, mhe_solve, propagate_with_imu,
    read_measurement_log, write_measurement_log,
)
from sitebot.geometry import Pose, quat_angle, so3_exp, so3_log

G = np.array([0.0, 0.0, -9.81])
R_W, TRACK = 0.1, 0.5


# ---------------------------------------------------------------------------
# trajectory generator
# ---------------------------------------------------------------------------

def planar_drive(duration, speed, yaw_rate, dt=0.005, theta0=0.0, p0=(0.0, 0.0, 0.0)):
    """Planar drive sampled at the IMU rate.

    ``speed`` and ``yaw_rate`` are callables of time. Positions follow the
    same zero-order-hold discretization an IMU integrator uses, so noiseless
    IMU samples are exactly consistent with the returned truth.
    """
    n = int(round(duration / dt))
    t = np.arange(n + 1) * dt
    th = np.empty(n + 1)
    th[0] = theta0
    for k in range(n):
        th[k + 1] = th[k] + yaw_rate(t[k]) * dt
    s = np.array([speed(tk) for tk in t])
    v = np.stack([s * np.cos(th), s * np.sin(th), np.zeros_like(s)], axis=1)
    p = np.empty((n + 1, 3))
    p[0] = p0
    imu = []
    for k in range(n):
        a_w = (v[k + 1] - v[k]) / dt
        p[k + 1] = p[k] + v[k] * dt + 0.5 * a_w * dt * dt
        R = so3_exp([0, 0, th[k]])
        imu.append(Measurement.imu(t[k], [0, 0, yaw_rate(t[k])], R.T @ (a_w - G)))
    wheels = []
    step = 2                          # encoders at 100 Hz
    for k in range(step, n + 1, step):
        d = np.linalg.norm(p[k] - p[k - step]) * np.sign(s[k - step:k + 1].mean() or 1.0)
        vbar = d / (step * dt)
        wbar = (th[k] - th[k - step]) / (step * dt)
        left = (vbar - wbar * TRACK / 2) / R_W
        right = (vbar + wbar * TRACK / 2) / R_W
        wheels.append(Measurement.wheels(t[k], left, right, step * dt))
    return t, th, p, v, imu, wheels


def truth_at(t, th, p, tq):
    k = int(round(tq / (t[1] - t[0])))
    return Pose.from_rotation(p[k], so3_exp([0, 0, th[k]]))


def cfg(**kw):
    return MheConfig(wheel_radius=R_W, track_width=TRACK, **kw)


def knot_errors(state, t, th, p):
    pos, rot = [], []
    for k in state.knots:
        tr = truth_at(t, th, p, k.t)
        pos.append(np.linalg.norm(k.position - tr.position))
        rot.append(quat_angle(k.pose.orientation, tr.orientation))
    return max(pos), max(rot)


# ---------------------------------------------------------------------------
# differential drive
# ---------------------------------------------------------------------------

class TestDifferentialDrive:
    def test_straight(self):
        out = differential_drive_predict(Pose.identity(), 2.0, 2.0, 0.1, 0.5, 1.5)
        assert np.allclose(out.position, [0.3, 0, 0], atol=1e-15)
        assert abs(out.yaw) < 1e-15

    def test_spin(self):
        out = differential_drive_predict(Pose.identity(), -1.0, 1.0, 0.1, 0.5, 0.7)
        assert np.linalg.norm(out.position) < 1e-15
        assert out.yaw == pytest.approx(0.1 * 2 / 0.5 * 0.7)

    @pytest.mark.parametrize("wl,wr", [(1.0, 3.0), (4.0, -1.0), (2.5, 2.6)])
    def test_against_rk4(self, wl, wr):
        r, b, T = 0.1, 0.5, 0.8
        v = r * (wl + wr) / 2
        w = r * (wr - wl) / b

        def f(x):
            return np.array([v * math.cos(x[2]), v * math.sin(x[2]), w])

        x = np.array([0.3, -0.2, 0.4])
        h = T / 1000
        for _ in range(1000):
            k1 = f(x)
            k2 = f(x + h / 2 * k1)
            k3 = f(x + h / 2 * k2)
            k4 = f(x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out = differential_drive_predict(Pose.from_planar(0.3, -0.2, 0.4), wl, wr, r, b, T)
        assert np.linalg.norm(out.position[:2] - x[:2]) < 1e-6
        assert abs(out.yaw - x[2]) < 1e-9

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            differential_drive_predict(Pose.identity(), 1, 1, 0.1, 0.5, 0.0)


# ---------------------------------------------------------------------------
# error terms
# ---------------------------------------------------------------------------

def state_from(poses, vels=None, t0=0.0, dt=0.1, bg=(0, 0, 0), ba=(0, 0, 0)):
    vels = vels if vels is not None else [np.zeros(3)] * len(poses)
    knots = tuple(Knot(t0 + i * dt, p.position, p.rotation, np.asarray(v, float))
                  for i, (p, v) in enumerate(zip(poses, vels)))
    return EstimatorState(knots, np.asarray(bg, float), np.asarray(ba, float))


class TestErrorTerms:
    def test_pose_update_consistent(self):
        p = Pose.from_rotvec([1, 2, 0.1], [0.02, -0.01, 0.7])
        s = state_from([p, p])
        assert np.allclose(error_term(s, Measurement.pose(0.0, p)), 0, atol=1e-12)

    def test_stationary_wheels(self):
        p = Pose.from_planar(1.0, -1.0, 0.5)
        s = state_from([p, p])
        ms = [Measurement.wheels(0.01 * k, 0.0, 0.0, 0.01) for k in range(1, 11)]
        assert np.allclose(error_term(s, ms, cfg()), 0, atol=1e-12)

    def test_constant_acceleration(self):
        a = np.array([0.4, -0.3, 0.2])
        dt = 0.1
        s = state_from([Pose.identity(), Pose.translation(*(0.5 * a * dt * dt))],
                       vels=[np.zeros(3), a * dt])
        ms = [Measurement.imu(0.005 * k, [0, 0, 0], a - G) for k in range(20)]
        assert np.allclose(error_term(s, ms, cfg()), 0, atol=1e-9)

    def test_outside_window(self):
        s = state_from([Pose.identity(), Pose.identity()])
        with pytest.raises(ValueError):
            error_term(s, Measurement.pose(5.0, Pose.identity()))


def random_state(rng, n=2):
    poses = [Pose.from_rotvec(rng.normal(size=3), rng.normal(scale=0.5, size=3))
             for _ in range(n)]
    vels = [rng.normal(size=3) for _ in range(n)]
    return state_from(poses, vels, bg=rng.normal(scale=0.02, size=3),
                      ba=rng.normal(scale=0.1, size=3))


def check_jacobians(e0, blocks, f, X, h=1e-6):
    order = sorted(X.knots)
    nvar = 9 * len(order) + 6
    for b, J in blocks.items():
        c0 = 9 * order.index(b[1]) if b != "bias" else 9 * len(order)
        for c in range(J.shape[1]):
            d = np.zeros(nvar)
            d[c0 + c] = h
            ep, _ = f.evaluate(X.retract(order, d))
            em, _ = f.evaluate(X.retract(order, -d))
            fd = (ep - em) / (2 * h)
            scale = max(np.linalg.norm(fd), np.linalg.norm(J[:, c]), 1e-3)
            assert np.linalg.norm(J[:, c] - fd) <= 1e-5 * scale, (b, c)


class TestJacobians:
    @pytest.mark.parametrize("seed", range(5))
    def test_pose(self, seed):
        rng = np.random.default_rng(seed)
        s = random_state(rng)
        z = Measurement.pose(0.1, Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3)))
        check_jacobians(*error_term(s, z, cfg(), jacobians=True))

    @pytest.mark.parametrize("seed", range(5))
    def test_odometry(self, seed):
        rng = np.random.default_rng(seed)
        s = random_state(rng)
        ms = [Measurement.wheels(0.01 * k, *rng.normal(scale=3, size=2), 0.01)
              for k in range(1, 11)]
        check_jacobians(*error_term(s, ms, cfg(), jacobians=True))

    @pytest.mark.parametrize("seed", range(5))
    def test_imu(self, seed):
        rng = np.random.default_rng(seed)
        s = random_state(rng)
        ms = [Measurement.imu(0.005 * k, rng.normal(scale=0.5, size=3),
                              rng.normal(scale=2, size=3) - G) for k in range(20)]
        e, blocks, f, X = error_term(s, ms, cfg(), jacobians=True)
        # move the bias away from the preintegration point to exercise the correction
        X.bg = X.bg + rng.normal(scale=0.01, size=3)
        X.ba = X.ba + rng.normal(scale=0.05, size=3)
        e, blocks = f.evaluate(X)
        check_jacobians(e, blocks, f, X)

    def test_prior_and_marginalization(self):
        t, th, p, v, imu, wheels = planar_drive(1.5, lambda t: 0.4, lambda t: 0.3)
        mhe = MovingHorizonEstimator(cfg(window=5))
        ms = imu + wheels + [Measurement.pose(0.0, truth_at(t, th, p, 0.0))]
        mhe_solve(ms, estimator=mhe, t_end=1.5)
        assert mhe.prior is not None
        X = mhe.X
        e, blocks = mhe.prior.evaluate(X)
        # jitter so the prior residual is non-zero
        order = sorted(X.knots)
        X2 = X.retract(order, np.random.default_rng(0).normal(scale=0.05, size=9 * len(order) + 6))
        e, blocks = mhe.prior.evaluate(X2)
        check_jacobians(e, blocks, mhe.prior, X2)


def test_preintegration_bias_correction():
    rng = np.random.default_rng(3)
    gy = rng.normal(scale=0.3, size=(20, 3))
    ac = rng.normal(scale=1.0, size=(20, 3))
    base = ImuPreintegration(np.zeros(3), np.zeros(3))
    for g, a in zip(gy, ac):
        base.integrate(g, a, 0.005)
    dbg = np.array([1e-4, -2e-4, 1.5e-4])
    dba = np.array([2e-3, 1e-3, -1e-3])
    exact = ImuPreintegration(dbg, dba)
    for g, a in zip(gy, ac):
        exact.integrate(g, a, 0.005)
    dR, dv, dp = base.corrected(dbg, dba)
    assert np.linalg.norm(so3_log(dR.T @ exact.dR)) < 1e-8
    assert np.linalg.norm(dv - exact.dv) < 1e-8
    assert np.linalg.norm(dp - exact.dp) < 1e-9


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class TestSolve:
    def test_single_pose_update(self):
        p = Pose.from_rotvec([1.0, -2.0, 0.3], [0.05, 0.02, 1.2])
        st = mhe_solve([Measurement.pose(0.0, p)], cfg())
        assert not st.rank_deficient
        assert st.latest.pose.allclose(p, atol=1e-12)

    def test_straight_drive_zero_noise(self):
        t, th, p, v, imu, wheels = planar_drive(6.0, lambda t: 0.5, lambda t: 0.0)
        poses = [Measurement.pose(tk, truth_at(t, th, p, tk)) for tk in np.arange(0, 6.01, 1.0)]
        mhe = MovingHorizonEstimator(cfg())
        worst = 0.0
        ms = sorted(imu + wheels + poses, key=lambda m: m.timestamp)
        for k in range(1, 61):
            tk = round(0.1 * k, 10)
            mhe.extend([m for m in ms if m.timestamp <= tk + 1e-9])
            st = mhe.update(tk)
            worst = max(worst, knot_errors(st, t, th, p)[0])
        assert worst < 1e-6

    def test_curved_drive_zero_noise(self):
        t, th, p, v, imu, wheels = planar_drive(
            5.0, lambda t: 0.3 + 0.1 * math.sin(t), lambda t: 0.4 * math.cos(0.7 * t),
            theta0=0.3, p0=(1.0, -2.0, 0.0))
        poses = [Measurement.pose(tk, truth_at(t, th, p, tk)) for tk in np.arange(0, 5.01, 0.5)]
        mhe = MovingHorizonEstimator(cfg())
        ms = sorted(imu + wheels + poses, key=lambda m: m.timestamp)
        worst_p = worst_r = 0.0
        for k in range(1, 51):
            tk = round(0.1 * k, 10)
            mhe.extend([m for m in ms if m.timestamp <= tk + 1e-9])
            st = mhe.update(tk)
            ep, er = knot_errors(st, t, th, p)
            worst_p, worst_r = max(worst_p, ep), max(worst_r, er)
        assert worst_p < 1e-6
        assert worst_r < 1e-6

    def test_smoothing_gain(self):
        rng = np.random.default_rng(7)
        knots = rng.normal(size=31)
        t, th, p, v, imu, wheels = planar_drive(
            30.0, lambda t: 0.3, lambda t: 0.3 * np.interp(t, np.arange(31), knots))
        noisy = []
        raw_err = []
        for tk in np.arange(0, 30.01, 0.5):
            tr = truth_at(t, th, p, tk)
            n = rng.normal(scale=0.01, size=3)
            n[2] = 0.0
            noisy.append(Measurement.pose(tk, Pose(tr.position + n, tr.orientation),
                                          sigma_position=0.01))
            raw_err.append(np.linalg.norm(n))
        st_err = []
        mhe = MovingHorizonEstimator(cfg())
        ms = sorted(imu + wheels + noisy, key=lambda m: m.timestamp)
        j = 0
        for k in range(1, 301):
            tk = round(0.1 * k, 10)
            while j < len(ms) and ms[j].timestamp <= tk + 1e-9:
                mhe.add(ms[j])
                j += 1
            st = mhe.update(tk)
            tr = truth_at(t, th, p, st.latest.t)
            st_err.append(np.linalg.norm(st.latest.position - tr.position))
        rmse = lambda x: float(np.sqrt(np.mean(np.square(x))))
        assert rmse(st_err) < rmse(raw_err)

    def test_anchor_invariance(self):
        t, th, p, v, imu, wheels = planar_drive(2.0, lambda t: 0.4, lambda t: 0.2)
        rng = np.random.default_rng(1)
        poses = [Measurement.pose(tk, Pose(truth_at(t, th, p, tk).position
                                           + rng.normal(scale=0.01, size=3),
                                           truth_at(t, th, p, tk).orientation))
                 for tk in (0.0, 0.5, 1.0, 1.5)]
        a = mhe_solve(imu + wheels + poses, cfg(), t_end=2.0)
        b = mhe_solve(imu + wheels + poses + [poses[2]], cfg(), t_end=2.0)
        for ka, kb in zip(a.knots, b.knots):
            assert np.linalg.norm(ka.position - kb.position) <= 1e-9

    def test_odometry_asymmetry(self):
        still = lambda t: 0.0
        t, th, p, v, imu, wheels = planar_drive(1.0, still, still)
        origin = Pose.identity()
        conflict = Pose.translation(0.05, 0.0, 0.0)
        ms = imu + wheels + [Measurement.pose(0.0, origin), Measurement.pose(1.0, conflict)]
        tight = mhe_solve(ms, cfg(), t_end=1.0)
        loose = mhe_solve(ms, cfg(odom_stationary_sigma=(0.0099, 0.0099)), t_end=1.0)
        move_tight = np.linalg.norm(tight.latest.position)
        move_loose = np.linalg.norm(loose.latest.position)
        assert move_tight < move_loose

    def test_rank_deficient_holds(self):
        t, th, p, v, imu, wheels = planar_drive(1.0, lambda t: 0.0, lambda t: 0.0)
        mhe = MovingHorizonEstimator(cfg())
        mhe.extend(imu)
        st = mhe.update(0.5)
        assert st.rank_deficient
        assert mhe.flags["rank_deficient"] >= 1

    def test_replay_bit_exact(self, tmp_path):
        t, th, p, v, imu, wheels = planar_drive(1.5, lambda t: 0.4, lambda t: 0.3)
        rng = np.random.default_rng(2)
        poses = [Measurement.pose(tk, Pose(truth_at(t, th, p, tk).position
                                           + rng.normal(scale=0.01, size=3),
                                           truth_at(t, th, p, tk).orientation))
                 for tk in (0.0, 0.5, 1.0)]
        ms = sorted(imu + wheels + poses, key=lambda m: m.timestamp)
        log = tmp_path / "meas.jsonl"
        write_measurement_log(log, ms)
        a = mhe_solve(ms, cfg(), t_end=1.5)
        b = mhe_solve(read_measurement_log(log), cfg(), t_end=1.5)
        for ka, kb in zip(a.knots, b.knots):
            assert ka.position.tobytes() == kb.position.tobytes()
            assert ka.rotation.tobytes() == kb.rotation.tobytes()


class TestPropagate:
    def test_static(self):
        s = state_from([Pose.from_planar(1, 2, 0.3)])
        imu = [Measurement.imu(0.005 * k, [0, 0, 0], -G) for k in range(20)]
        pose, vel, stale = propagate_with_imu(s, imu, 0.1)
        assert pose.allclose(Pose.from_planar(1, 2, 0.3), atol=1e-15)
        assert np.allclose(vel, 0)
        assert not stale

    def test_constant_yaw_rate(self):
        s = state_from([Pose.identity()])
        w = 0.7
        imu = [Measurement.imu(0.005 * k, [0, 0, w], -G) for k in range(40)]
        pose, _, _ = propagate_with_imu(s, imu, 0.2)
        assert abs(pose.yaw - w * 0.2) < 1e-9

    def test_arc_against_truth(self):
        t, th, p, v, imu, wheels = planar_drive(2.0, lambda t: 0.5, lambda t: 0.6)
        k0 = 200
        knot = Knot(t[k0], p[k0], so3_exp([0, 0, th[k0]]), v[k0])
        s = EstimatorState((knot,), np.zeros(3), np.zeros(3))
        pose, _, stale = propagate_with_imu(s, imu, t[k0] + 0.05)
        tr = truth_at(t, th, p, t[k0] + 0.05)
        assert np.linalg.norm(pose.position - tr.position) < 1e-3
        assert np.degrees(quat_angle(pose.orientation, tr.orientation)) < 0.01
        assert not stale

    def test_gap_flags_stale(self):
        s = state_from([Pose.identity()])
        imu = [Measurement.imu(0.0, [0, 0, 0], -G), Measurement.imu(0.2, [0, 0, 0], -G)]
        assert propagate_with_imu(s, imu, 0.25)[2]
        assert propagate_with_imu(s, [], 0.3)[2]

    def test_target_before_knot(self):
        s = state_from([Pose.identity()], t0=1.0)
        with pytest.raises(ValueError):
            propagate_with_imu(s, [], 0.5)


def test_measurement_validation():
    with pytest.raises(ValueError):
        Measurement.wheels(0.0, 1, 1, 0.0)
    with pytest.raises(TypeError):
        Measurement(0.0, "imu", Pose.identity())
    with pytest.raises(ValueError):
        Measurement(0.0, "lidar", None)
