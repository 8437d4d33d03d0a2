"""Kino-dynamic quadruped model.

State (45): [c, l, kappa, p_b, dtheta_b, theta_j, v_b, nu_b, v_j]
  c        CoM position (world)
  l        linear momentum (world)
  kappa    angular momentum about the CoM (world)
  p_b      base position (world)
  dtheta_b rotation-vector increment of the base orientation relative to a
           per-node reference rotation: R_b = R_ref @ exp([dtheta_b])
  theta_j  joint angles, leg-major [HAA, HFE, KFE] per leg
  v_b, nu_b, v_j  their velocities (nu_b is the body angular velocity)

Control (30): [lambda_0..lambda_3, a_b, psi_b, a_j] - one 3-D contact force
per foot plus base linear / angular and joint accelerations.

The centroidal block follows Newton-Euler: cdot = l/m, ldot = m g + sum of
forces, kappadot = sum (p_foot - c) x lambda.  The kinematic block is a
double integrator.  Momentum consistency between the two blocks is enforced
as a path constraint, not inside the dynamics.

Legs are 3-DoF chains: HAA about base x, then HFE and KFE about y, with the
thigh and shank (lengths l1, l2) extending along local -z, so the zero
configuration points each foot straight down.  Mass is lumped: one base body
with a diagonal rotational inertia plus point masses at each thigh and shank
midpoint.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import (
    Dual,
    RateDual,
    collect_jacobian,
    collect_rate_jacobian,
    cos,
    seed_duals,
    seed_rate_duals,
    sin,
    sqrt,
)

GRAVITY = 9.81

NX = 45
NU = 30
N_LEGS = 4
N_JOINTS = 12

LEG_NAMES = ("FL", "FR", "HL", "HR")


class StateLayout:
    """Index slices into the 45-entry state vector."""

    com = slice(0, 3)
    lin_momentum = slice(3, 6)
    ang_momentum = slice(6, 9)
    base_pos = slice(9, 12)
    base_orient = slice(12, 15)
    joint_pos = slice(15, 27)
    base_linvel = slice(27, 30)
    base_angvel = slice(30, 33)
    joint_vel = slice(33, 45)
    # configuration / generalized-velocity sub-vectors of the kinematic block
    config = slice(9, 27)
    velocity = slice(27, 45)


class ControlLayout:
    """Index slices into the 30-entry control vector."""

    forces = slice(0, 12)
    base_linacc = slice(12, 15)
    base_angacc = slice(15, 18)
    joint_acc = slice(18, 30)

    @staticmethod
    def force(leg):
        return slice(3 * leg, 3 * leg + 3)


@dataclass(frozen=True)
class RobotModel:
    """Geometry and mass distribution of the simplified quadruped."""

    total_mass: float = 2.5
    base_inertia: np.ndarray = field(
        default_factory=lambda: np.diag([0.02, 0.04, 0.05])
    )
    thigh_length: float = 0.16
    shank_length: float = 0.16
    link_mass: float = 0.06
    hip_offsets: np.ndarray = field(
        default_factory=lambda: np.array(
            [
                [0.19, 0.105, 0.0],
                [0.19, -0.105, 0.0],
                [-0.19, 0.105, 0.0],
                [-0.19, -0.105, 0.0],
            ]
        )
    )

    @property
    def base_mass(self):
        return self.total_mass - 2 * N_LEGS * self.link_mass

    @property
    def n_legs(self):
        return N_LEGS

    @property
    def state_dim(self):
        return NX

    @property
    def control_dim(self):
        return NU


def default_quadruped():
    return RobotModel()


# ---------------------------------------------------------------------------
# scalar-generic 3-D helpers (floats, Duals, RateDuals)


def rot_x(t):
    c, s = cos(t), sin(t)
    return [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]


def rot_y(t):
    c, s = cos(t), sin(t)
    return [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]


def rot_z(t):
    c, s = cos(t), sin(t)
    return [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]


def exp_so3(v):
    """Rotation matrix of a rotation vector, series form near zero."""
    x, y, z = v
    t2 = x * x + y * y + z * z
    if t2 < 1e-8:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        t = sqrt(t2)
        a = sin(t) / t
        b = (1.0 - cos(t)) / t2
    return [
        [1.0 - b * (y * y + z * z), -a * z + b * x * y, a * y + b * x * z],
        [a * z + b * x * y, 1.0 - b * (x * x + z * z), -a * x + b * y * z],
        [-a * y + b * x * z, a * x + b * y * z, 1.0 - b * (x * x + y * y)],
    ]


def mat_vec(R, v):
    return [
        R[0][0] * v[0] + R[0][1] * v[1] + R[0][2] * v[2],
        R[1][0] * v[0] + R[1][1] * v[1] + R[1][2] * v[2],
        R[2][0] * v[0] + R[2][1] * v[1] + R[2][2] * v[2],
    ]


def mat_mat(A, B):
    return [
        [sum(A[i][k] * B[k][j] for k in range(3)) for j in range(3)]
        for i in range(3)
    ]


def cross(a, b):
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]


def cross_matrix(a):
    return np.array(
        [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
    )


def base_rotation(R_ref, dtheta):
    """World rotation of the base: reference composed with the increment."""
    E = exp_so3(dtheta)
    out = [[0.0] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(3):
            out[i][j] = (
                R_ref[i][0] * E[0][j] + R_ref[i][1] * E[1][j] + R_ref[i][2] * E[2][j]
            )
    return out


# ---------------------------------------------------------------------------
# kinematics


def _leg_chain(model, leg, q3):
    """Rotation products and attachment points of one leg, in base frame.

    Returns (thigh_mid, shank_mid, foot) with the HAA/HFE/KFE convention
    described in the module docstring.  R2 = Rx(HAA) Ry(HFE) is expanded by
    hand to skip the zero entries.
    """
    q1, q2, q3_ = q3
    c1, s1 = cos(q1), sin(q1)
    c2, s2 = cos(q2), sin(q2)
    c3, s3 = cos(q3_), sin(q3_)
    # R2 = Rx(q1) @ Ry(q2)
    r2_col0 = [c2, s1 * s2, -c1 * s2]
    r2_col2 = [s2, -s1 * c2, c1 * c2]
    # R3 = R2 @ Ry(q3): only the third column is needed
    r3_col2 = [
        s3 * r2_col0[0] + c3 * r2_col2[0],
        s3 * r2_col0[1] + c3 * r2_col2[1],
        s3 * r2_col0[2] + c3 * r2_col2[2],
    ]
    o = model.hip_offsets[leg]
    l1 = model.thigh_length
    l2 = model.shank_length
    knee = [o[0] - l1 * r2_col2[0], o[1] - l1 * r2_col2[1], o[2] - l1 * r2_col2[2]]
    thigh_mid = [
        o[0] - 0.5 * l1 * r2_col2[0],
        o[1] - 0.5 * l1 * r2_col2[1],
        o[2] - 0.5 * l1 * r2_col2[2],
    ]
    shank_mid = [
        knee[0] - 0.5 * l2 * r3_col2[0],
        knee[1] - 0.5 * l2 * r3_col2[1],
        knee[2] - 0.5 * l2 * r3_col2[2],
    ]
    foot = [
        knee[0] - l2 * r3_col2[0],
        knee[1] - l2 * r3_col2[1],
        knee[2] - l2 * r3_col2[2],
    ]
    return thigh_mid, shank_mid, foot


def foot_position_base(model, leg, joint_angles):
    """Foot position in the base frame for one leg's [HAA, HFE, KFE]."""
    return _leg_chain(model, leg, list(joint_angles))[2]


def forward_kinematics(model, base_pos, R_base, joint_config):
    """World foot positions for all legs; scalar-generic.

    base_pos: 3-vector; R_base: 3x3 (nested rows); joint_config: 12 angles.
    """
    feet = []
    for leg in range(N_LEGS):
        p = foot_position_base(model, leg, joint_config[3 * leg : 3 * leg + 3])
        w = mat_vec(R_base, p)
        feet.append([base_pos[0] + w[0], base_pos[1] + w[1], base_pos[2] + w[2]])
    return feet


def _mass_points(model, base_pos, R_base, joint_config):
    """All lumped mass points and feet in world frame, with masses.

    Returns (points, masses, feet): points is the base origin followed by
    thigh/shank midpoints leg by leg.
    """
    points = [list(base_pos)]
    masses = [model.base_mass]
    feet = []
    for leg in range(N_LEGS):
        tm, sm, foot = _leg_chain(
            model, leg, joint_config[3 * leg : 3 * leg + 3]
        )
        for p_local in (tm, sm):
            w = mat_vec(R_base, p_local)
            points.append(
                [base_pos[0] + w[0], base_pos[1] + w[1], base_pos[2] + w[2]]
            )
            masses.append(model.link_mass)
        w = mat_vec(R_base, foot)
        feet.append([base_pos[0] + w[0], base_pos[1] + w[1], base_pos[2] + w[2]])
    return points, masses, feet


def com_world(model, R_ref, config):
    """CoM of the lumped mass distribution; scalar-generic.

    config: 18 entries [p_b, dtheta_b, theta_j].
    """
    base_pos = config[0:3]
    R_base = base_rotation(R_ref, config[3:6])
    points, masses, _ = _mass_points(model, base_pos, R_base, config[6:18])
    acc = [0.0, 0.0, 0.0]
    for p, m in zip(points, masses):
        acc[0] = acc[0] + m * p[0]
        acc[1] = acc[1] + m * p[1]
        acc[2] = acc[2] + m * p[2]
    inv = 1.0 / model.total_mass
    return [acc[0] * inv, acc[1] * inv, acc[2] * inv]


class KinematicsData:
    """Positions, velocities, momenta and their configuration/velocity
    Jacobians at one node, produced by a single forward-mode pass."""

    __slots__ = (
        "com",
        "com_jac",
        "com_vel",
        "com_vel_jac",
        "foot_pos",
        "foot_vel",
        "foot_jac",
        "foot_vel_jac",
        "momentum",
        "mom_jac_q",
        "mom_jac_qd",
        "base_rot",
    )


def evaluate_kinematics(model, R_ref, config, config_vel):
    """Evaluate FK, CoM, and centroidal momentum with all Jacobians.

    config and config_vel are the 18-entry kinematic coordinates and their
    velocities.  One rate-dual pass yields every position p, velocity
    v = J qd, and the Jacobians of both with respect to config; velocity
    Jacobians with respect to config_vel come from the same derivative data
    (dv/dqd equals dp/dq, and the momentum rows assemble column-wise).
    """
    q = seed_rate_duals(list(config), list(config_vel), 18)
    base_pos = q[0:3]
    R_base = base_rotation(R_ref, q[3:6])
    points, masses, feet = _mass_points(model, base_pos, R_base, q[6:18])

    data = KinematicsData()

    # one collect for every tracked scalar: 9 mass points, 4 feet, 9
    # rotation entries
    flat = [coord for p in points for coord in p]
    flat += [coord for f in feet for coord in f]
    flat += [e for row in R_base for e in row]
    av, ar, aj, arj = collect_rate_jacobian(flat, 18)
    n_pts = len(points)
    s = 3 * n_pts
    pv = av[:s].reshape(n_pts, 3)
    pr = ar[:s].reshape(n_pts, 3)
    pj = aj[:s].reshape(n_pts, 3, 18)
    prj = arj[:s].reshape(n_pts, 3, 18)
    data.foot_pos = av[s : s + 12].reshape(N_LEGS, 3)
    data.foot_vel = ar[s : s + 12].reshape(N_LEGS, 3)
    data.foot_jac = aj[s : s + 12].reshape(N_LEGS, 3, 18)
    data.foot_vel_jac = arj[s : s + 12].reshape(N_LEGS, 3, 18)
    Rb_val = av[s + 12 :].reshape(3, 3)
    Rb_jac = aj[s + 12 :].reshape(3, 3, 18)

    m = np.asarray(masses)
    inv_m = 1.0 / model.total_mass
    data.com = inv_m * (m @ pv)
    data.com_vel = inv_m * (m @ pr)
    data.com_jac = inv_m * np.tensordot(m, pj, axes=1)
    data.com_vel_jac = inv_m * np.tensordot(m, prj, axes=1)

    # linear momentum and its Jacobians
    lin = model.total_mass * data.com_vel
    lin_jac_q = model.total_mass * data.com_vel_jac
    lin_jac_qd = model.total_mass * data.com_jac

    # angular momentum about the CoM: point-mass part plus the lumped base
    # rotational inertia R I_b nu
    rel = pv - data.com
    relv = pr - data.com_vel
    rel_jac = pj - data.com_jac
    relv_jac = prj - data.com_vel_jac
    mrel = rel * m[:, None]
    ang = np.cross(mrel, relv).sum(axis=0)
    # d/dq of sum m rel x relv; d/dqd goes through relv only, whose
    # velocity Jacobian equals the position one
    Xrel = _batch_cross_matrix(mrel)
    Xrelv = _batch_cross_matrix(relv * m[:, None])
    ang_jac_q = (
        np.matmul(Xrel, relv_jac) - np.matmul(Xrelv, rel_jac)
    ).sum(axis=0)
    ang_jac_qd = np.matmul(Xrel, rel_jac).sum(axis=0)

    I_nu = model.base_inertia @ np.asarray(config_vel[3:6], dtype=np.float64)
    ang += Rb_val @ I_nu
    ang_jac_q += np.tensordot(I_nu, Rb_jac, axes=([0], [1]))
    ang_jac_qd[:, 3:6] += Rb_val @ model.base_inertia

    data.momentum = np.concatenate([ang, lin])
    data.mom_jac_q = np.vstack([ang_jac_q, lin_jac_q])
    data.mom_jac_qd = np.vstack([ang_jac_qd, lin_jac_qd])
    data.base_rot = Rb_val
    return data


class TrajectoryKinematics:
    """Value-only kinematic quantities for a whole trajectory of nodes."""

    __slots__ = ("com", "com_vel", "momentum", "foot_pos", "foot_vel")


def _batch_exp_so3(v):
    """Rotation matrices of (T, 3) rotation vectors; complex-safe."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    t2 = x * x + y * y + z * z
    small = np.real(t2) < 1e-8
    t2_safe = np.where(small, 1.0, t2)
    t = np.sqrt(t2_safe)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / t2_safe)
    E = np.empty(v.shape[:1] + (3, 3), dtype=v.dtype)
    E[:, 0, 0] = 1.0 - b * (y * y + z * z)
    E[:, 0, 1] = -a * z + b * x * y
    E[:, 0, 2] = a * y + b * x * z
    E[:, 1, 0] = a * z + b * x * y
    E[:, 1, 1] = 1.0 - b * (x * x + z * z)
    E[:, 1, 2] = -a * x + b * y * z
    E[:, 2, 0] = -a * y + b * x * z
    E[:, 2, 1] = a * x + b * y * z
    E[:, 2, 2] = 1.0 - b * (x * x + y * y)
    return E


_CSTEP = 1e-200


def evaluate_trajectory_kinematics(model, R_ref, configs, config_vels):
    """Positions, velocities and momenta for many nodes in one pass.

    configs and config_vels are (T, 18) arrays of kinematic coordinates and
    their velocities.  Values match evaluate_kinematics node by node; no
    Jacobians are produced.  Velocities come from a complex-step directional
    derivative along the velocity, which is exact to machine precision and
    lets the whole trajectory run as a handful of vectorized array ops.
    """
    configs = np.asarray(configs, dtype=np.float64)
    vels = np.asarray(config_vels, dtype=np.float64)
    T = configs.shape[0]
    if R_ref is None:
        R_ref = np.eye(3)
    q = configs + 1j * _CSTEP * vels

    E = _batch_exp_so3(q[:, 3:6])
    R_base = np.einsum("ij,tjk->tik", np.asarray(R_ref, dtype=np.float64), E)

    base_pos = q[:, 0:3]
    points = np.empty((T, 1 + 2 * N_LEGS, 3), dtype=complex)
    points[:, 0] = base_pos
    feet = np.empty((T, N_LEGS, 3), dtype=complex)
    l1 = model.thigh_length
    l2 = model.shank_length
    for leg in range(N_LEGS):
        q1 = q[:, 6 + 3 * leg]
        q2 = q[:, 7 + 3 * leg]
        q3 = q[:, 8 + 3 * leg]
        c1, s1 = np.cos(q1), np.sin(q1)
        c2, s2 = np.cos(q2), np.sin(q2)
        c3, s3 = np.cos(q3), np.sin(q3)
        r2_col0 = np.stack([c2, s1 * s2, -c1 * s2], axis=1)
        r2_col2 = np.stack([s2, -s1 * c2, c1 * c2], axis=1)
        r3_col2 = s3[:, None] * r2_col0 + c3[:, None] * r2_col2
        o = model.hip_offsets[leg]
        thigh_mid = o - 0.5 * l1 * r2_col2
        shank_mid = o - l1 * r2_col2 - 0.5 * l2 * r3_col2
        foot = o - l1 * r2_col2 - l2 * r3_col2
        points[:, 1 + 2 * leg] = base_pos + np.einsum("tij,tj->ti", R_base, thigh_mid)
        points[:, 2 + 2 * leg] = base_pos + np.einsum("tij,tj->ti", R_base, shank_mid)
        feet[:, leg] = base_pos + np.einsum("tij,tj->ti", R_base, foot)

    masses = np.empty(1 + 2 * N_LEGS)
    masses[0] = model.base_mass
    masses[1:] = model.link_mass
    com = np.einsum("p,tpi->ti", masses, points) / model.total_mass

    rel = points - com[:, None, :]
    rel_val = np.real(rel)
    rel_rate = np.imag(rel) / _CSTEP
    ang = np.einsum("p,tpi->ti", masses, np.cross(rel_val, rel_rate))
    I_nu = vels[:, 3:6] @ model.base_inertia.T
    ang += np.einsum("tij,tj->ti", np.real(R_base), I_nu)

    out = TrajectoryKinematics()
    out.com = np.real(com)
    out.com_vel = np.imag(com) / _CSTEP
    out.foot_pos = np.real(feet)
    out.foot_vel = np.imag(feet) / _CSTEP
    lin = model.total_mass * out.com_vel
    out.momentum = np.concatenate([ang, lin], axis=1)
    return out


def _value(x):
    return x.value if isinstance(x, (Dual, RateDual)) else float(x)


def _batch_cross_matrix(a):
    n = a.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -a[:, 2]
    out[:, 0, 2] = a[:, 1]
    out[:, 1, 0] = a[:, 2]
    out[:, 1, 2] = -a[:, 0]
    out[:, 2, 0] = -a[:, 1]
    out[:, 2, 1] = a[:, 0]
    return out


def compute_momentum_matrix(model, R_ref, config):
    """Centroidal momentum matrix A_G (6x18): [kappa; l] = A_G qd.

    Rows 1-3 map generalized velocities to angular momentum about the CoM,
    rows 4-6 to linear momentum.
    """
    data = evaluate_kinematics(model, R_ref, config, np.zeros(18))
    return data.mom_jac_qd


# ---------------------------------------------------------------------------
# dynamics


def continuous_dynamics(model, R_ref, x, u):
    """State derivative; scalar-generic over floats and duals.

    x and u are sequences (length 45 / 30).  Returns a list of 45 entries.
    """
    com = x[0:3]
    lin = x[3:6]
    config = x[9:27]
    vel = x[27:45]
    forces = u[0:12]
    accel = u[12:30]

    base_pos = config[0:3]
    R_base = base_rotation(R_ref, config[3:6])
    feet = forward_kinematics(model, base_pos, R_base, config[6:18])

    inv_m = 1.0 / model.total_mass
    dcom = [lin[0] * inv_m, lin[1] * inv_m, lin[2] * inv_m]

    dlin = [0.0, 0.0, -model.total_mass * GRAVITY]
    dang = [0.0, 0.0, 0.0]
    for leg in range(N_LEGS):
        f = forces[3 * leg : 3 * leg + 3]
        arm = [feet[leg][0] - com[0], feet[leg][1] - com[1], feet[leg][2] - com[2]]
        tau = cross(arm, f)
        dlin = [dlin[0] + f[0], dlin[1] + f[1], dlin[2] + f[2]]
        dang = [dang[0] + tau[0], dang[1] + tau[1], dang[2] + tau[2]]

    return list(dcom) + list(dlin) + list(dang) + list(vel) + list(accel)


def discretize_implicit(model, R_ref, x, x_next, u, dt):
    """Implicit-Euler residual x_next - x - dt * f(x_next, u); generic."""
    f = continuous_dynamics(model, R_ref, x_next, u)
    return [x_next[i] - x[i] - dt * f[i] for i in range(NX)]


def dynamics_jacobians(model, R_ref, x_eval, u):
    """f value and Jacobians (f_x, f_u) at (x_eval, u).

    f_x comes from one dual pass seeded over the state; f_u is assembled in
    closed form (forces enter linearly, accelerations are pass-through).
    """
    xd = seed_duals(np.asarray(x_eval, dtype=np.float64), NX)
    f = continuous_dynamics(model, R_ref, xd, list(np.asarray(u, dtype=np.float64)))
    f_val, f_x = collect_jacobian(f, NX)

    f_u = np.zeros((NX, NU))
    com = np.asarray(x_eval[0:3], dtype=np.float64)
    config = np.asarray(x_eval[9:27], dtype=np.float64)
    R_base = np.array(
        [
            [_value(e) for e in row]
            for row in base_rotation(R_ref, list(config[3:6]))
        ]
    )
    feet = forward_kinematics(model, config[0:3], R_base, list(config[6:18]))
    for leg in range(N_LEGS):
        cols = slice(3 * leg, 3 * leg + 3)
        f_u[3:6, cols] = np.eye(3)
        arm = np.array([_value(c) for c in feet[leg]]) - com
        f_u[6:9, cols] = cross_matrix(arm)
    f_u[27:45, 12:30] = np.eye(18)
    return f_val, f_x, f_u


def dynamics_jacobians_from_kin(model, kin, x, u):
    """Analytic (f, f_x, f_u) reusing a node's KinematicsData.

    The only nonlinear rows are the torque balance; their sensitivities
    follow from the foot positions and Jacobians already computed by
    evaluate_kinematics at the same state.  Matches dynamics_jacobians.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    com = x[0:3]
    forces = u[0:12]

    f_val = np.zeros(NX)
    f_x = np.zeros((NX, NX))
    f_u = np.zeros((NX, NU))

    inv_m = 1.0 / model.total_mass
    f_val[0:3] = x[3:6] * inv_m
    f_x[0:3, 3:6] = inv_m * np.eye(3)

    f_val[3:6] = [0.0, 0.0, -model.total_mass * GRAVITY]
    total_force = np.zeros(3)
    for leg in range(N_LEGS):
        lam = forces[3 * leg : 3 * leg + 3]
        total_force += lam
        arm = kin.foot_pos[leg] - com
        f_val[6:9] += np.cross(arm, lam)
        lam_x = cross_matrix(lam)
        f_x[6:9, 9:27] -= lam_x @ kin.foot_jac[leg]
        f_u[3:6, 3 * leg : 3 * leg + 3] = np.eye(3)
        f_u[6:9, 3 * leg : 3 * leg + 3] = cross_matrix(arm)
    f_val[3:6] += total_force
    f_x[6:9, 0:3] = cross_matrix(total_force)

    f_val[9:27] = x[27:45]
    f_x[9:27, 27:45] = np.eye(18)
    f_val[27:45] = u[12:30]
    f_u[27:45, 12:30] = np.eye(18)
    return f_val, f_x, f_u


def integrate_implicit(model, R_ref, x, u, dt, tol=1e-10, max_iter=20):
    """One implicit-Euler step solved by Newton iteration on the residual."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    f0 = np.asarray(
        continuous_dynamics(model, R_ref, list(x), list(u)), dtype=np.float64
    )
    x_next = x + dt * f0
    for _ in range(max_iter):
        f_val, f_x, _ = dynamics_jacobians(model, R_ref, x_next, u)
        res = x_next - x - dt * f_val
        if np.max(np.abs(res)) < tol:
            return x_next
        jac = np.eye(NX) - dt * f_x
        x_next = x_next - np.linalg.solve(jac, res)
    raise RuntimeError("implicit integration step did not converge")


def linearize_dynamics(model, R_ref, x, u, dt):
    """Jacobians (A, B) of the explicit update map x+ = F(x, u).

    Solves the implicit step for x+, then differentiates through it:
    A = (I - dt f_x)^-1 and B = (I - dt f_x)^-1 dt f_u with the Jacobians
    evaluated at (x+, u).  Also returns x+.
    """
    x_next = integrate_implicit(model, R_ref, x, u, dt)
    _, f_x, f_u = dynamics_jacobians(model, R_ref, x_next, u)
    A, B = sensitivities_from_jacobians(f_x, f_u, dt)
    return A, B, x_next


def sensitivities_from_jacobians(f_x, f_u, dt):
    """(A, B) of the implicit step given f Jacobians at the endpoint."""
    lhs = np.eye(NX) - dt * f_x
    AB = np.linalg.solve(lhs, np.hstack([np.eye(NX), dt * f_u]))
    return AB[:, :NX], AB[:, NX:]
