"""Path-constraint residuals and the tracking cost.

Sign convention: inequality residuals are feasible when <= 0.  Face
residuals are expressed in the surface frame (yaw about world z), one row
per polytope face in the order +x, -x, +y, -y.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import sqrt
from .model import StateLayout, evaluate_kinematics, mat_vec, rot_z

CONE_EPS = 1e-6


@dataclass(frozen=True)
class ContactSurface:
    """A small rectangular stepping stone: center, yaw, half extents."""

    center: np.ndarray
    yaw: float = 0.0
    half_extents: np.ndarray = field(
        default_factory=lambda: np.array([0.1, 0.1])
    )
    mu: float = 0.5

    def rotation_2d(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s], [s, c]])


@dataclass(eq=False)
class ContactPlan:
    """Fixed contact modes and surface assignments over a node schedule.

    contact_state[k, i] marks foot i in contact at node k; surface_index
    holds the surface id (-1 in swing).  Force variables are gated by the
    interval mode: a foot may push during [k, k+1) only when in contact at
    both ends, so landing intervals stay force-free.
    """

    contact_state: np.ndarray
    surface_index: np.ndarray
    surfaces: tuple
    dt: float

    def __post_init__(self):
        self.contact_state = np.asarray(self.contact_state, dtype=bool)
        self.surface_index = np.asarray(self.surface_index, dtype=np.int64)
        state, idx = self.contact_state, self.surface_index
        # a foot in contact across consecutive nodes must keep its surface
        both = state[:-1] & state[1:]
        if np.any(both & (idx[:-1] != idx[1:])):
            raise ValueError("stance foot switches surface between nodes")

    @property
    def n_nodes(self):
        return self.contact_state.shape[0] - 1

    @property
    def n_legs(self):
        return self.contact_state.shape[1]

    @property
    def contact_ctrl(self):
        return self.contact_state[:-1] & self.contact_state[1:]

    def surface_of(self, node, leg):
        return self.surfaces[self.surface_index[node, leg]]


@dataclass(frozen=True)
class SlackWeights:
    """L1/L2 penalty weight pairs per constraint family."""

    cone: tuple = (5e0, 5e-1)
    foot_velocity: tuple = (5e2, 0.0)
    kinodyn_com: tuple = (0.0, 5e1)
    kinodyn_ang: tuple = (0.0, 1e1)
    kinodyn_lin: tuple = (0.0, 1e1)
    face_xy: tuple = (1e4, 0.0)
    height_z: tuple = (5e4, 0.0)

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            l1, l2 = getattr(self, name)
            if l1 < 0 or l2 < 0:
                raise ValueError(f"slack weights must be >= 0, got {name}={l1, l2}")


def default_slack_weights(gait="trot"):
    """Stock slack penalty weights for the named gait."""
    if gait == "trot":
        return SlackWeights()
    if gait == "bound":
        return SlackWeights(
            cone=(1e3, 0.0), foot_velocity=(1e4, 0.0), height_z=(3e4, 0.0)
        )
    raise ValueError(f"unknown gait '{gait}'")


def default_tracking_weights(gait="trot"):
    """Stock diagonal tracking weights (Q over states, R over controls)."""
    if gait == "trot":
        nu_b, v_j, acc = 6e2, 8e1, 6e-3
        f_leg = [1e1, 1e1, 2e0]
    elif gait == "bound":
        nu_b, v_j, acc = 2e2, 6e1, 1e-2
        f_leg = [1e2, 2e1, 2e0]
    else:
        raise ValueError(f"unknown gait '{gait}'")
    Q = np.concatenate(
        [
            np.full(3, 2e3),   # CoM
            np.full(3, 2e2),   # linear momentum
            np.full(3, 2e4),   # angular momentum
            np.full(3, 2e1),   # base position
            np.full(3, 2e2),   # base orientation increment
            np.full(12, 1e3),  # joint positions
            np.full(3, 2e2),   # base linear velocity
            np.full(3, nu_b),  # base angular velocity
            np.full(12, v_j),  # joint velocities
        ]
    )
    R = np.concatenate([np.tile(f_leg, 4), np.full(18, acc)])
    return Q, R


def friction_cone_residual(force, mu, yaw=0.0, eps=CONE_EPS):
    """Smoothed second-order cone residual in the surface frame; <= 0 inside.

    sqrt(fx^2 + fy^2 + eps^2) - mu * fz with the force rotated by the
    surface yaw.  Scalar-generic so it can be seeded with duals.
    """
    if yaw != 0.0:
        R = rot_z(-yaw)
        force = mat_vec(R, list(force))
    fx, fy, fz = force[0], force[1], force[2]
    return sqrt(fx * fx + fy * fy + eps * eps) - mu * fz


def friction_cone_jacobian(force, mu, yaw=0.0, eps=CONE_EPS):
    """Gradient of the cone residual with respect to the 3 force entries."""
    force = np.asarray(force, dtype=np.float64)
    Rt = np.eye(3)
    if yaw != 0.0:
        Rt = np.asarray(rot_z(-yaw))
    f = Rt @ force
    n = np.sqrt(f[0] * f[0] + f[1] * f[1] + eps * eps)
    g_local = np.array([f[0] / n, f[1] / n, -mu])
    return g_local @ Rt


def contact_face_residuals(surface, foot_pos):
    """Polytope face residuals (+x, -x, +y, -y) of a world foot position."""
    d = surface.rotation_2d().T @ (np.asarray(foot_pos[0:2]) - surface.center[0:2])
    hx, hy = surface.half_extents
    return np.array([d[0] - hx, -d[0] - hx, d[1] - hy, -d[1] - hy])


def contact_face_normals(surface):
    """Rows of d(face residual)/d(foot xy), one per face."""
    R = surface.rotation_2d()
    return np.array([R[:, 0], -R[:, 0], R[:, 1], -R[:, 1]])


def contact_height_residual(surface, foot_pos):
    """Signed height error of the foot against the surface plane."""
    return foot_pos[2] - surface.center[2]


def kinodynamic_residual(model, R_ref, x):
    """Consistency between the centroidal and kinematic state blocks.

    Rows 0-2: c - CoM(config); rows 3-8: [kappa; l] - A_G(config) qd.
    Zero iff the centroidal quantities match the kinematic ones.
    """
    x = np.asarray(x, dtype=np.float64)
    kin = evaluate_kinematics(
        model, R_ref, x[StateLayout.config], x[StateLayout.velocity]
    )
    return kinodynamic_rows(kin, x)[0]


def kinodynamic_rows(kin, x):
    """Residual (9,) and Jacobian (9,45) from precomputed kinematics."""
    x = np.asarray(x, dtype=np.float64)
    res = np.empty(9)
    res[0:3] = x[0:3] - kin.com
    res[3:6] = x[6:9] - kin.momentum[0:3]
    res[6:9] = x[3:6] - kin.momentum[3:6]
    jac = np.zeros((9, 45))
    jac[0:3, 0:3] = np.eye(3)
    jac[0:3, 9:27] = -kin.com_jac
    jac[3:6, 6:9] = np.eye(3)
    jac[3:6, 9:27] = -kin.mom_jac_q[0:3]
    jac[3:6, 27:45] = -kin.mom_jac_qd[0:3]
    jac[6:9, 3:6] = np.eye(3)
    jac[6:9, 9:27] = -kin.mom_jac_q[3:6]
    jac[6:9, 27:45] = -kin.mom_jac_qd[3:6]
    return res, jac


def evaluate_cost(Q, R, x, u, x_ref, u_ref=None):
    """Least-squares tracking stage cost 0.5 |x - x_ref|^2_Q + 0.5 |u|^2_R.

    Q and R may be 1-D (diagonal) or full matrices.  A control reference
    may be supplied; the default is zero.
    """
    dx = np.asarray(x, dtype=np.float64) - np.asarray(x_ref, dtype=np.float64)
    du = np.asarray(u, dtype=np.float64)
    if u_ref is not None:
        du = du - np.asarray(u_ref, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    qx = dx * Q @ dx if Q.ndim == 1 else dx @ Q @ dx
    ru = du * R @ du if R.ndim == 1 else du @ R @ du
    return 0.5 * (qx + ru)


def slack_cost(l2_weights, l1_weights, s):
    """Penalty on nonnegative constraint slacks: 0.5 q s^2 + p s, summed."""
    s = np.asarray(s, dtype=np.float64)
    return float(0.5 * np.sum(l2_weights * s * s) + np.sum(l1_weights * s))
