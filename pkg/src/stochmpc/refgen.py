"""Gait schedules, stepping-stone layouts, and reference trajectories.

The generator builds a kinematic plan first: base and swing-foot position
profiles on the control grid, joint angles from closed-form leg inverse
kinematics, and velocities from backward differences so the implicit-Euler
kinematic update q[k+1] = q[k] + dt v[k+1] holds exactly.  Momentum and
center-of-mass references come from the same kinematics pass, which makes
the momentum-consistency rows vanish along the reference.  Contact forces
are distributed with a minimum-norm least-squares fit to the discrete
momentum rates, so the force references match the translational balance
exactly and the rotational balance up to the torque component about the
support axis that two-legged stances cannot produce.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import ContactPlan, ContactSurface
from .model import (
    GRAVITY,
    NU,
    NX,
    ControlLayout,
    StateLayout,
    cross_matrix,
    evaluate_kinematics,
    forward_kinematics,
)

TROT_SEQUENCE = ((0, 3), (1, 2))
BOUND_SEQUENCE = ((0, 1), (2, 3))

_X = StateLayout()
_U = ControlLayout()


class ReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class GaitSpec:
    """Periodic stepping pattern on the control grid.

    swing_sequence lists the leg groups that swing in turn inside one
    cycle; each group is airborne for swing_nodes intervals and every
    phase is followed by stance_nodes of full support.
    """

    swing_sequence: tuple
    lead_in_nodes: int
    swing_nodes: int
    stance_nodes: int
    n_cycles: int
    stride: float
    swing_height: float = 0.05
    base_height: float = 0.27

    @property
    def cycle_nodes(self):
        return len(self.swing_sequence) * (self.swing_nodes + self.stance_nodes)


def make_gait(name, **overrides):
    """Named gait presets; keyword overrides replace individual fields."""
    presets = {
        "trot": dict(
            swing_sequence=TROT_SEQUENCE,
            lead_in_nodes=16,
            swing_nodes=16,
            stance_nodes=8,
            n_cycles=3,
            stride=0.09,
        ),
        "bound": dict(
            swing_sequence=BOUND_SEQUENCE,
            lead_in_nodes=8,
            swing_nodes=14,
            stance_nodes=10,
            n_cycles=3,
            stride=0.07,
        ),
    }
    if name not in presets:
        raise ReferenceError(f"unknown gait '{name}'")
    cfg = presets[name]
    cfg.update(overrides)
    return GaitSpec(**cfg)


@dataclass
class ReferenceTrajectory:
    dt: float
    states: np.ndarray
    controls: np.ndarray
    contact_state: np.ndarray
    contact_ctrl: np.ndarray
    surface_index: np.ndarray
    surfaces: list
    foot_positions: np.ndarray
    touchdowns: list = field(default_factory=list)
    liftoffs: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return self.states.shape[0] - 1

    def contact_plan(self):
        """The fixed contact schedule of this reference as a ContactPlan."""
        return ContactPlan(
            contact_state=self.contact_state,
            surface_index=self.surface_index,
            surfaces=tuple(self.surfaces),
            dt=self.dt,
        )


# ---------------------------------------------------------------------------
# leg inverse kinematics


def leg_ik(model, leg, foot_base):
    """Joint angles (hip roll, hip pitch, knee) for a base-frame foot target.

    Uses the positive-knee branch; raises ReferenceError when the target is
    out of reach.
    """
    hip = np.asarray(model.hip_offsets[leg], dtype=np.float64)
    d = np.asarray(foot_base, dtype=np.float64) - hip
    l1 = model.thigh_length
    l2 = model.shank_length

    q1 = math.atan2(d[1], -d[2])
    # rotate into the leg plane: x stays, the yz part folds onto -z
    r_yz = math.hypot(d[1], d[2])
    x = d[0]
    z = -r_yz

    rho_sq = x * x + z * z
    reach = l1 + l2
    if math.sqrt(rho_sq) > reach + 1e-9:
        raise ReferenceError(
            f"leg {leg} target out of reach: need {math.sqrt(rho_sq):.4f}"
            f" of {reach:.4f}"
        )
    cos_knee = (rho_sq - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    cos_knee = min(1.0, max(-1.0, cos_knee))
    q3 = math.acos(cos_knee)

    a = l1 + l2 * math.cos(q3)
    b = l2 * math.sin(q3)
    q2 = math.atan2(-x, -z) - math.atan2(b, a)
    return np.array([q1, q2, q3])


# ---------------------------------------------------------------------------
# schedule and footholds


def _smoothstep(tau):
    # zero velocity through third derivative at both ends, so the sampled
    # profile is flat across the first and last node interval and feet lift
    # off and touch down without a finite-difference velocity jump
    t4 = tau * tau * tau * tau
    return t4 * (35.0 + tau * (-84.0 + tau * (70.0 - 20.0 * tau)))


def _swing_bump(tau):
    s = tau * (1.0 - tau)
    return 16.0 * s * s


def _phase_table(gait):
    """Per-phase (start, swing legs) swing windows inside the full plan."""
    phases = []
    node = gait.lead_in_nodes
    for _ in range(gait.n_cycles):
        for legs in gait.swing_sequence:
            phases.append((node, legs))
            node += gait.swing_nodes + gait.stance_nodes
    return phases, node


def build_reference(
    model, gait, dt, tail_nodes, stone_half_extents=(0.05, 0.05), mu=0.5
):
    """Reference trajectory, contact schedule, and stone layout for a gait."""
    phases, active_end = _phase_table(gait)
    T = active_end + tail_nodes
    n_legs = len(model.hip_offsets)

    base0 = np.array([0.0, 0.0, gait.base_height])
    # initial stance: feet on the ground directly below the hips
    feet0 = np.asarray(model.hip_offsets, dtype=np.float64).copy()
    feet0[:, 2] = 0.0

    # schedule and foot position profiles
    contact_state = np.ones((T + 1, n_legs), dtype=bool)
    foot_pos = np.tile(feet0[None, :, :], (T + 1, 1, 1)).astype(np.float64)
    foot_now = feet0.copy()

    surfaces = []
    surface_of_leg = np.zeros(n_legs, dtype=np.int64)
    hx, hy = stone_half_extents
    for i in range(n_legs):
        surfaces.append(
            ContactSurface(
                center=foot_now[i].copy(), yaw=0.0, half_extents=(hx, hy), mu=mu
            )
        )
        surface_of_leg[i] = i
    surface_index = np.zeros((T + 1, n_legs), dtype=np.int64)
    surface_index[:] = surface_of_leg[None, :]

    touchdowns = []
    liftoffs = []
    for start, legs in phases:
        a = start
        b = start + gait.swing_nodes
        for leg in legs:
            target = foot_now[leg] + np.array([gait.stride, 0.0, 0.0])
            stone = ContactSurface(
                center=target.copy(), yaw=0.0, half_extents=(hx, hy), mu=mu
            )
            stone_id = len(surfaces)
            surfaces.append(stone)
            # land one node early: the foot sits on the target through the
            # final swing interval, so the backward-difference foot velocity
            # at the first stance node is exactly zero
            span = max(1, b - 1 - a)
            for k in range(a + 1, b):
                sigma = _smoothstep(min(1.0, (k - a) / float(span)))
                xy = foot_now[leg] + sigma * (target - foot_now[leg])
                foot_pos[k, leg] = xy
                foot_pos[k, leg, 2] = (
                    target[2] + gait.swing_height * _swing_bump(sigma)
                )
                contact_state[k, leg] = False
                surface_index[k, leg] = -1
            foot_pos[b:, leg] = target
            surface_index[b:, leg] = stone_id
            foot_now[leg] = target
            surface_of_leg[leg] = stone_id
            liftoffs.append((a + 1, leg))
            touchdowns.append((b, leg))

    contact_ctrl = contact_state[:-1] & contact_state[1:]

    # base profile: trapezoidal forward speed, ramps placed in the
    # all-stance lead-in and tail so four legs share the accel load
    distance = gait.stride * gait.n_cycles
    active_span = gait.cycle_nodes * gait.n_cycles
    v_nom = distance / (active_span * dt) if active_span else 0.0
    ramp_up = max(1, gait.lead_in_nodes)
    ramp_down = max(1, min(tail_nodes - 2, gait.lead_in_nodes)) if tail_nodes else 1
    vx = np.zeros(T + 1)
    s0 = gait.lead_in_nodes
    s1 = active_end
    for k in range(T + 1):
        if k <= s0 - ramp_up or k > s1 + ramp_down:
            v = 0.0
        elif k < s0:
            # linear ramps keep the acceleration at its mean value
            v = v_nom * (k - (s0 - ramp_up)) / float(ramp_up)
        elif k <= s1:
            v = v_nom
        else:
            v = v_nom * (s1 + ramp_down - k) / float(ramp_down)
        vx[k] = v
    # discrete integration matching the implicit kinematic update
    base_x = np.concatenate([[0.0], np.cumsum(vx[1:]) * dt])
    scale = distance / base_x[-1] if base_x[-1] > 0 else 1.0
    vx *= scale
    base_x *= scale

    # joint angles from IK at every node
    config = np.zeros((T + 1, 18))
    for k in range(T + 1):
        base_pos = base0 + np.array([base_x[k], 0.0, 0.0])
        config[k, 0:3] = base_pos
        for leg in range(n_legs):
            config[k, 6 + 3 * leg : 9 + 3 * leg] = leg_ik(
                model, leg, foot_pos[k, leg] - base_pos
            )

    vel = np.zeros((T + 1, 18))
    vel[1:] = (config[1:] - config[:-1]) / dt
    vel[0] = vel[1]

    # states from one kinematics pass per node
    states = np.zeros((T + 1, NX))
    com = np.zeros((T + 1, 3))
    momentum = np.zeros((T + 1, 6))
    feet_world = np.zeros((T + 1, n_legs, 3))
    eye = np.eye(3)
    for k in range(T + 1):
        kin = evaluate_kinematics(model, eye, config[k], vel[k])
        com[k] = kin.com
        momentum[k] = kin.momentum
        feet_world[k] = kin.foot_pos
        states[k, _X.com] = kin.com
        states[k, _X.lin_momentum] = kin.momentum[3:6]
        states[k, _X.ang_momentum] = kin.momentum[0:3]
        states[k, _X.config] = config[k]
        states[k, _X.velocity] = vel[k]

    # controls: accelerations from forward differences, forces least-squares
    controls = np.zeros((T, NU))
    m_tot = model.total_mass
    grav = np.array([0.0, 0.0, GRAVITY])
    for k in range(T):
        controls[k, _U.base_linacc] = (vel[k + 1, 0:3] - vel[k, 0:3]) / dt
        controls[k, _U.base_angacc] = (vel[k + 1, 3:6] - vel[k, 3:6]) / dt
        controls[k, _U.joint_acc] = (vel[k + 1, 6:18] - vel[k, 6:18]) / dt

        legs = np.where(contact_ctrl[k])[0]
        if legs.size == 0:
            continue
        f_des = (momentum[k + 1, 3:6] - momentum[k, 3:6]) / dt + m_tot * grav
        tau_des = (momentum[k + 1, 0:3] - momentum[k, 0:3]) / dt
        n_st = legs.size
        # equal split satisfies the force rows exactly; the torque fit then
        # lives in the zero-net-force nullspace so the split is preserved
        lam = np.tile(f_des / n_st, n_st)
        X = np.zeros((3, 3 * n_st))
        for j, leg in enumerate(legs):
            X[:, 3 * j : 3 * j + 3] = cross_matrix(
                feet_world[k + 1, leg] - com[k + 1]
            )
        if n_st > 1:
            B = np.zeros((3 * n_st, 3 * (n_st - 1)))
            for j in range(1, n_st):
                B[0:3, 3 * (j - 1) : 3 * j] = -np.eye(3)
                B[3 * j : 3 * j + 3, 3 * (j - 1) : 3 * j] = np.eye(3)
            w, *_ = np.linalg.lstsq(X @ B, tau_des - X @ lam, rcond=None)
            lam = lam + B @ w
        for j, leg in enumerate(legs):
            controls[k, _U.force(leg)] = lam[3 * j : 3 * j + 3]

    return ReferenceTrajectory(
        dt=dt,
        states=states,
        controls=controls,
        contact_state=contact_state,
        contact_ctrl=contact_ctrl,
        surface_index=surface_index,
        surfaces=surfaces,
        foot_positions=foot_pos,
        touchdowns=touchdowns,
        liftoffs=liftoffs,
    )
