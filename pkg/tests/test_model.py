"""Model oracles: frozen kinematics/dynamics values plus AD-vs-FD checks."""

import math

import numpy as np
import pytest

from stochmpc import model as M
from stochmpc import numerics

ROBOT = M.default_quadruped()
EYE3 = np.eye(3)


def test_mass_budget():
    assert abs(ROBOT.base_mass - (2.5 - 8 * 0.06)) < 1e-12
    assert abs(ROBOT.total_mass - 2.5) < 1e-12


def test_foot_position_zero_config():
    for leg in range(4):
        p = np.asarray(M.foot_position_base(ROBOT, leg, [0.0, 0.0, 0.0]))
        expected = ROBOT.hip_offsets[leg] + [0.0, 0.0, -0.32]
        np.testing.assert_allclose(p, expected, atol=1e-15)


def test_foot_position_knee_bent():
    p = np.asarray(M.foot_position_base(ROBOT, 1, [0.0, 0.0, math.pi / 2]))
    expected = ROBOT.hip_offsets[1] + [-0.16, 0.0, -0.16]
    np.testing.assert_allclose(p, expected, atol=1e-15)


def test_forward_kinematics_yawed_base():
    yaw = 0.4
    base = np.array([0.3, -0.1, 0.5])
    feet = M.forward_kinematics(ROBOT, base, M.rot_z(yaw), [0.0] * 12)
    Rz = np.asarray(M.rot_z(yaw))
    for leg in range(4):
        local = ROBOT.hip_offsets[leg] + [0.0, 0.0, -0.32]
        np.testing.assert_allclose(feet[leg], base + Rz @ local, atol=1e-14)


def test_exp_so3_orthonormal_both_branches():
    rng = np.random.default_rng(2)
    for scale in (1e-6, 1e-3, 0.3, 2.0):
        v = rng.normal(size=3) * scale
        R = np.asarray(M.exp_so3(list(v)))
        np.testing.assert_allclose(R @ R.T, EYE3, atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_exp_so3_pure_yaw_matches_rot_z():
    R = np.asarray(M.exp_so3([0.0, 0.0, 0.7]))
    np.testing.assert_allclose(R, np.asarray(M.rot_z(0.7)), atol=1e-14)


def test_torque_about_com_frozen_example():
    # single supporting foot at (0.1, 0, 0), CoM at (0, 0, 0.2), vertical
    # force equal to the robot weight: no net linear force, pure y torque
    x = np.zeros(45)
    u = np.zeros(30)
    x[0:3] = [0.0, 0.0, 0.2]
    # place the front-left foot at (0.1, 0, 0) via the base position
    x[9:12] = np.array([0.1, 0.0, 0.32]) - ROBOT.hip_offsets[0]
    u[2] = 2.5 * 9.81
    xdot = M.continuous_dynamics(ROBOT, EYE3, list(x), list(u))
    np.testing.assert_allclose(xdot[3:6], [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(xdot[6:9], [0.0, -2.4525, 0.0], atol=1e-12)


def test_free_fall_momentum_rate():
    x = np.zeros(45)
    x[3:6] = [1.0, 2.0, 3.0]
    xdot = M.continuous_dynamics(ROBOT, EYE3, list(x), list(np.zeros(30)))
    np.testing.assert_allclose(xdot[0:3], np.array([1.0, 2.0, 3.0]) / 2.5)
    np.testing.assert_allclose(xdot[3:6], [0.0, 0.0, -2.5 * 9.81])
    np.testing.assert_allclose(xdot[6:9], [0.0, 0.0, 0.0])


def _random_state(rng, scale=0.3):
    x = rng.normal(size=45) * scale
    x[12:15] *= 0.5  # keep the orientation increment moderate
    return x


def test_dynamics_jacobians_match_fd():
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = _random_state(rng)
        u = rng.normal(size=30)
        _, f_x, f_u = M.dynamics_jacobians(ROBOT, EYE3, x, u)

        def fx_only(xs):
            return M.continuous_dynamics(ROBOT, EYE3, xs, list(u))

        def fu_only(us):
            return M.continuous_dynamics(ROBOT, EYE3, list(x), us)

        fd_x = numerics.finite_difference_jacobian(fx_only, x)
        fd_u = numerics.finite_difference_jacobian(fu_only, u)
        assert np.max(np.abs(f_x - fd_x)) < 1e-6
        assert np.max(np.abs(f_u - fd_u)) < 1e-6


def test_analytic_dynamics_jacobians_match_ad():
    rng = np.random.default_rng(40)
    for _ in range(5):
        x = _random_state(rng)
        u = rng.normal(size=30)
        f1, fx1, fu1 = M.dynamics_jacobians(ROBOT, EYE3, x, u)
        kin = M.evaluate_kinematics(ROBOT, EYE3, x[9:27], x[27:45])
        f2, fx2, fu2 = M.dynamics_jacobians_from_kin(ROBOT, kin, x, u)
        np.testing.assert_allclose(f1, f2, atol=1e-12)
        np.testing.assert_allclose(fx1, fx2, atol=1e-12)
        np.testing.assert_allclose(fu1, fu2, atol=1e-12)


def test_implicit_residual_jacobians_match_fd():
    rng = np.random.default_rng(5)
    x = _random_state(rng)
    xn = _random_state(rng)
    u = rng.normal(size=30)
    dt = 0.01

    def res_next(z):
        return M.discretize_implicit(ROBOT, EYE3, list(x), z, list(u), dt)

    J_ad = numerics.jacobian(res_next, xn)
    J_fd = numerics.finite_difference_jacobian(res_next, xn)
    assert np.max(np.abs(J_ad - J_fd)) < 1e-6


def test_kinematics_pass_against_fd():
    rng = np.random.default_rng(6)
    q = rng.normal(size=18) * 0.3
    qd = rng.normal(size=18)
    data = M.evaluate_kinematics(ROBOT, EYE3, q, qd)
    h = 1e-6
    for j in range(18):
        e = np.zeros(18)
        e[j] = h
        dp = M.evaluate_kinematics(ROBOT, EYE3, q + e, qd)
        dm = M.evaluate_kinematics(ROBOT, EYE3, q - e, qd)
        vp = M.evaluate_kinematics(ROBOT, EYE3, q, qd + e)
        vm = M.evaluate_kinematics(ROBOT, EYE3, q, qd - e)
        np.testing.assert_allclose(
            (dp.momentum - dm.momentum) / (2 * h), data.mom_jac_q[:, j], atol=2e-6
        )
        np.testing.assert_allclose(
            (vp.momentum - vm.momentum) / (2 * h), data.mom_jac_qd[:, j], atol=2e-6
        )
        np.testing.assert_allclose(
            (dp.foot_pos - dm.foot_pos) / (2 * h), data.foot_jac[:, :, j], atol=2e-6
        )
        np.testing.assert_allclose(
            (dp.foot_vel - dm.foot_vel) / (2 * h),
            data.foot_vel_jac[:, :, j],
            atol=2e-6,
        )
        np.testing.assert_allclose(
            (dp.com - dm.com) / (2 * h), data.com_jac[:, j], atol=2e-6
        )


def test_momentum_is_linear_in_velocity():
    rng = np.random.default_rng(7)
    q = rng.normal(size=18) * 0.2
    qd = rng.normal(size=18)
    data = M.evaluate_kinematics(ROBOT, EYE3, q, qd)
    A_G = M.compute_momentum_matrix(ROBOT, EYE3, q)
    np.testing.assert_allclose(data.momentum, A_G @ qd, atol=1e-12)
    np.testing.assert_allclose(data.mom_jac_qd, A_G, atol=1e-12)


def test_momentum_velocity_from_positions():
    # l equals the mass-weighted time derivative of the point positions:
    # compare against central differences along q(t) = q + t qd
    rng = np.random.default_rng(8)
    q = rng.normal(size=18) * 0.2
    qd = rng.normal(size=18)
    h = 1e-6
    cp = M.evaluate_kinematics(ROBOT, EYE3, q + h * qd, qd).com
    cm = M.evaluate_kinematics(ROBOT, EYE3, q - h * qd, qd).com
    data = M.evaluate_kinematics(ROBOT, EYE3, q, qd)
    lin_fd = ROBOT.total_mass * (cp - cm) / (2 * h)
    np.testing.assert_allclose(data.momentum[3:6], lin_fd, atol=1e-6)


def test_cmm_pure_base_rotation():
    # frozen joints, pure base angular velocity: linear momentum rows give
    # m * (omega x (c - p_b)) when the base rotation is the identity
    rng = np.random.default_rng(9)
    q = np.zeros(18)
    q[0:3] = rng.normal(size=3)
    q[6:18] = rng.normal(size=12) * 0.3
    omega = rng.normal(size=3)
    qd = np.zeros(18)
    qd[3:6] = omega
    data = M.evaluate_kinematics(ROBOT, EYE3, q, qd)
    c = data.com
    expected = ROBOT.total_mass * np.cross(omega, c - q[0:3])
    np.testing.assert_allclose(data.momentum[3:6], expected, atol=1e-12)


def test_com_world_matches_kinematics_pass():
    rng = np.random.default_rng(10)
    q = rng.normal(size=18) * 0.25
    c1 = np.asarray(M.com_world(ROBOT, EYE3, list(q)))
    c2 = M.evaluate_kinematics(ROBOT, EYE3, q, np.zeros(18)).com
    np.testing.assert_allclose(c1, c2, atol=1e-14)


def test_integrate_implicit_satisfies_residual():
    rng = np.random.default_rng(11)
    x = _random_state(rng, scale=0.2)
    u = rng.normal(size=30) * 0.5
    dt = 0.01
    xn = M.integrate_implicit(ROBOT, EYE3, x, u, dt)
    res = M.discretize_implicit(ROBOT, EYE3, list(x), list(xn), list(u), dt)
    assert np.max(np.abs(np.asarray(res, dtype=np.float64))) < 1e-9
    # kinematic block of implicit Euler in closed form
    np.testing.assert_allclose(
        xn[9:27], x[9:27] + dt * xn[27:45], atol=1e-9
    )
    np.testing.assert_allclose(xn[27:45], x[27:45] + dt * u[12:30], atol=1e-9)


def test_linearize_dynamics_matches_fd_of_step():
    rng = np.random.default_rng(12)
    x = _random_state(rng, scale=0.15)
    u = rng.normal(size=30) * 0.3
    dt = 0.01
    A, B, x_next = M.linearize_dynamics(ROBOT, EYE3, x, u, dt)
    res = M.discretize_implicit(ROBOT, EYE3, list(x), list(x_next), list(u), dt)
    assert np.max(np.abs(np.asarray(res, dtype=np.float64))) < 1e-9
    h = 1e-6
    cols = np.random.default_rng(0).choice(45, size=8, replace=False)
    for j in cols:
        e = np.zeros(45)
        e[j] = h
        xp = M.integrate_implicit(ROBOT, EYE3, x + e, u, dt)
        xm = M.integrate_implicit(ROBOT, EYE3, x - e, u, dt)
        np.testing.assert_allclose(A[:, j], (xp - xm) / (2 * h), atol=5e-6)
    for j in (0, 2, 13, 20, 29):
        e = np.zeros(30)
        e[j] = h
        xp = M.integrate_implicit(ROBOT, EYE3, x, u + e, dt)
        xm = M.integrate_implicit(ROBOT, EYE3, x, u - e, dt)
        np.testing.assert_allclose(B[:, j], (xp - xm) / (2 * h), atol=5e-6)


def test_base_rotation_composes_reference():
    rng = np.random.default_rng(13)
    v_ref = rng.normal(size=3)
    dth = rng.normal(size=3) * 0.2
    R_ref = np.asarray(M.exp_so3(list(v_ref)))
    R = np.asarray(M.base_rotation(R_ref, list(dth)))
    np.testing.assert_allclose(R, R_ref @ np.asarray(M.exp_so3(list(dth))), atol=1e-13)
