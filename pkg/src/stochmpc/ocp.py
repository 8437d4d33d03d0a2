"""Real-time iteration MPC over the kino-dynamic model.

Each control step solves one structured QP: a diagonal Gauss-Newton
Hessian over state/control increments and constraint slacks, dynamics in
implicit collocation form, kino-dynamic consistency, stance-foot velocity
and height conditions, friction cones, and contact-face inequalities that
can be tightened per face.  Three controller variants share the machinery:
nominal (no tightening), fixed safety margin on the contact faces, and
covariance-based tightening computed from closed-loop uncertainty
propagation at a per-face risk level.

Constraint Jacobians, implicit-step sensitivities, feedback gains, and the
face tightenings are evaluated on the offline reference and cached per
window position; a control step then only refreshes residual values and
cost gradients at the current iterate, updates the QP vectors, and
re-solves warm-started from the previous active set.  The cached
linearization is exact whenever the dynamics are linear, so on linear
quadratic problems a single step recovers the exact optimum.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .chance import (
    BackoffSchedule,
    CovarianceSchedule,
    RiskSpec,
    compute_backoff_schedule,
    linearize_contact_faces,
)
from .constraints import (
    contact_face_normals,
    default_slack_weights,
    default_tracking_weights,
    friction_cone_jacobian,
    friction_cone_residual,
    kinodynamic_rows,
)
from .model import (
    GRAVITY,
    NU,
    NX,
    StateLayout,
    dynamics_jacobians_from_kin,
    evaluate_kinematics,
    evaluate_trajectory_kinematics,
    sensitivities_from_jacobians,
)
from .numerics import solve_dare
from .qpsolver import (
    QpSettings,
    QpStructure,
    QuadraticProgram,
    WarmStart,
    solve_qp,
)

_REG = 1e-9
_DARE_REG = 1e-8

DYN = "dyn"
KINODYN = "kinodyn"
FOOTVEL = "footvel"
HEIGHT = "height"
FACE = "face"
CONE = "cone"


class OcpError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerMode:
    """Constraint-tightening policy of one controller variant.

    kind is "nmpc" (no tightening), "hnmpc" (fixed margin on every stance
    contact face), or "snmpc" (per-face margin from the propagated
    closed-loop covariance at risk level epsilon; zero when disturbance is
    None).
    """

    kind: str
    margin: float = 0.0
    epsilon: float = 0.01
    disturbance: object = None

    def __post_init__(self):
        if self.kind not in ("nmpc", "hnmpc", "snmpc"):
            raise OcpError(f"unknown controller kind '{self.kind}'")


def nmpc_mode():
    return ControllerMode("nmpc")


def hnmpc_mode(margin=0.03):
    return ControllerMode("hnmpc", margin=margin)


def snmpc_mode(epsilon=0.01, disturbance=None):
    return ControllerMode("snmpc", epsilon=epsilon, disturbance=disturbance)


@dataclass(eq=False)
class OcpDefinition:
    """One controller instance: model, contact plan, weights, reference, mode.

    Controllers that differ only in mode may (and for speed should) share a
    single OcpPrep, since the cached quantities do not depend on the
    tightening policy.  Definitions sharing a prep must use the same
    tracking and slack weights.
    """

    model: object
    plan: object
    horizon: int
    dt: float
    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray
    slack_weights: object
    reference: object
    mode: ControllerMode
    qp_settings: QpSettings = field(default_factory=QpSettings)
    prep: object = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.Q_N = np.asarray(self.Q_N, dtype=np.float64)
        if self.horizon < 2:
            raise OcpError("horizon must be >= 2")
        if self.reference.n_nodes < self.horizon:
            raise OcpError(
                f"reference has {self.reference.n_nodes} intervals, "
                f"horizon needs {self.horizon}"
            )
        if np.any(self.Q < 0) or np.any(self.R < 0) or np.any(self.Q_N < 0):
            raise OcpError("tracking weights must be >= 0")
        self._eta_cache = {}
        self._noise_cov = None


def default_mpc_qp_settings():
    """Subproblem solver tolerances for the nonlinear tracking loop.

    Pinned stance feet close kinematic chains, so the soft stance rows
    overlap and subproblem optima sit on mildly degenerate faces.  A damped
    active-set system with a 1e-5 verification gate stays robust there and
    is accurate far below the disturbance scale; the tight defaults remain
    in place for the linear-quadratic path.
    """
    return QpSettings(
        kkt_tol=1e-5,
        eps_abs=1e-5,
        eps_rel=1e-5,
        refine_steps=30,
    )


def make_ocp(model, reference, horizon, mode, gait="trot", prep=None,
             qp_settings=None, Q=None, R=None, Q_N=None, slack_weights=None):
    """Assemble an OcpDefinition with stock weights for the named gait."""
    Q_def, R_def = default_tracking_weights(gait)
    Q = Q_def if Q is None else np.asarray(Q, dtype=np.float64)
    R = R_def if R is None else np.asarray(R, dtype=np.float64)
    return OcpDefinition(
        model=model,
        plan=reference.contact_plan(),
        horizon=horizon,
        dt=reference.dt,
        Q=Q,
        R=R,
        Q_N=Q.copy() if Q_N is None else np.asarray(Q_N, dtype=np.float64),
        slack_weights=slack_weights or default_slack_weights(gait),
        reference=reference,
        mode=mode,
        qp_settings=qp_settings or default_mpc_qp_settings(),
        prep=prep,
    )


@dataclass(eq=False)
class LinearQuadraticOcp:
    """Tracking problem with linear dynamics x+ = A x + B u + c.

    Diagonal stage weights over states and controls; optional stage
    inequalities Cx dx + Cu du <= d and box bounds on the controls.  A and
    B may vary per stage (shape (N, n, n) / (N, n, m)).  rti_step is exact
    in one step on these problems.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray = None
    lb_u: np.ndarray = None
    ub_u: np.ndarray = None
    stage_ineq: list = None
    qp_settings: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.A.ndim == 2:
            self.A = np.repeat(self.A[None], self.c.shape[0], axis=0)
        if self.B.ndim == 2:
            self.B = np.repeat(self.B[None], self.c.shape[0], axis=0)
        self.horizon = self.c.shape[0]
        self.nx = self.A.shape[1]
        self.nu = self.B.shape[2]
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.Q_N = np.asarray(self.Q_N, dtype=np.float64)
        self.x_ref = np.asarray(self.x_ref, dtype=np.float64)
        if self.u_ref is None:
            self.u_ref = np.zeros((self.horizon, self.nu))
        else:
            self.u_ref = np.asarray(self.u_ref, dtype=np.float64)


@dataclass(eq=False)
class SqpIterate:
    """One linearization point: trajectory, slack values, and QP duals.

    dual_window records which window start produced row_duals.  Duals from
    the same window give the subproblem solver a strong warm start; duals
    shifted across windows land near degenerate faces and refine slower
    than a cold start, so the control step only reuses matching ones.
    act_lo/act_hi are the subproblem's converged active-set masks; unlike
    duals they re-key cleanly across window shifts and are the preferred
    warm start.
    """

    states: np.ndarray
    controls: np.ndarray
    slacks: np.ndarray = None
    row_duals: np.ndarray = None
    window_start: int = 0
    dual_window: int = None
    act_lo: np.ndarray = None
    act_hi: np.ndarray = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise OcpError("iterate needs one more state than controls")
        if self.slacks is not None and np.any(np.asarray(self.slacks) < -1e-12):
            raise OcpError("slack values must be nonnegative")

    @property
    def horizon(self):
        return self.controls.shape[0]


def make_initial_iterate(definition, window_start=0):
    """Cold-start iterate taken from the reference trajectory."""
    t = window_start
    N = definition.horizon
    ref = definition.reference
    if t < 0 or t + N > ref.n_nodes:
        raise OcpError(f"window [{t}, {t + N}] leaves the reference")
    return SqpIterate(
        states=ref.states[t : t + N + 1].copy(),
        controls=ref.controls[t : t + N].copy(),
        slacks=None,
        row_duals=None,
        window_start=t,
    )


@dataclass
class MpcSolution:
    """Result of one control step."""

    states: np.ndarray
    controls: np.ndarray
    u0: np.ndarray
    K0: np.ndarray
    status: str
    qp_status: str
    qp_iterations: int
    solve_time: float
    backoffs: object = None
    slack_max: float = 0.0

    @property
    def ok(self):
        return self.status == "solved"


# ---------------------------------------------------------------------------
# window layout


class _NodeLayout:
    __slots__ = (
        "j", "k", "has_x", "has_u", "stance_state", "stance_ctrl", "kept_u",
        "n_x", "n_u", "n_s", "s_off", "var_size", "slack_segs", "row_segs",
        "m", "bound_cols",
    )


def _stance_legs(mask):
    return tuple(int(i) for i in np.where(mask)[0])


def _node_layout(plan, j, has_x, has_u):
    """Variable and row bookkeeping for one node of a window.

    Variables: [dx (if any) | du over kept controls | slacks]; the kept
    controls are the stance-interval forces plus all accelerations, so
    swing-leg forces never enter the QP.  Rows: [dynamics | kino-dynamic |
    per stance foot (velocity, height, faces) | cones | slack bounds], with
    the bound rows trailing so the solver can treat them as variable
    bounds.
    """
    nl = _NodeLayout()
    nl.j = j
    nl.has_x = has_x
    nl.has_u = has_u
    nl.stance_state = _stance_legs(plan.contact_state[j]) if has_x else ()
    nl.stance_ctrl = _stance_legs(plan.contact_ctrl[j]) if has_u else ()
    if has_u:
        cols = [c for leg in nl.stance_ctrl for c in range(3 * leg, 3 * leg + 3)]
        cols += list(range(12, NU))
        nl.kept_u = np.asarray(cols, dtype=np.int64)
    else:
        nl.kept_u = np.zeros(0, dtype=np.int64)
    nl.n_x = NX if has_x else 0
    nl.n_u = int(nl.kept_u.size)

    slack_segs = []
    s = 0
    if has_x:
        slack_segs.append((KINODYN, -1, 0, 18))
        s = 18
        for leg in nl.stance_state:
            slack_segs.append((FOOTVEL, leg, s, 6))
            s += 6
            slack_segs.append((HEIGHT, leg, s, 2))
            s += 2
            slack_segs.append((FACE, leg, s, 4))
            s += 4
    if has_u:
        for leg in nl.stance_ctrl:
            slack_segs.append((CONE, leg, s, 1))
            s += 1
    nl.n_s = s
    nl.s_off = nl.n_x + nl.n_u
    nl.var_size = nl.n_x + nl.n_u + nl.n_s
    nl.slack_segs = slack_segs

    rows = []
    m = 0
    if has_u:
        rows.append((DYN, -1, 0, NX))
        m = NX
    if has_x:
        rows.append((KINODYN, -1, m, 9))
        m += 9
        for leg in nl.stance_state:
            rows.append((FOOTVEL, leg, m, 3))
            m += 3
            rows.append((HEIGHT, leg, m, 1))
            m += 1
            rows.append((FACE, leg, m, 4))
            m += 4
    if has_u:
        for leg in nl.stance_ctrl:
            rows.append((CONE, leg, m, 1))
            m += 1
    for fam, leg, off, ln in slack_segs:
        rows.append(("bnd:" + fam, leg, m, ln))
        m += ln
    nl.row_segs = rows
    nl.m = m
    nl.bound_cols = list(range(nl.s_off, nl.s_off + nl.n_s))
    return nl


def _row_of(nl, fam, leg):
    for f, l, off, ln in nl.row_segs:
        if f == fam and l == leg:
            return off, ln
    raise KeyError((fam, leg))


class _WindowLayout:
    """Node layouts plus global offsets and (node, family, leg) lookups."""

    def __init__(self, plan, t, N):
        self.t = t
        self.N = N
        self.nodes = []
        for k in range(N + 1):
            nl = _node_layout(plan, t + k, has_x=k > 0, has_u=k < N)
            nl.k = k
            self.nodes.append(nl)
        self.var_offsets = np.concatenate(
            [[0], np.cumsum([nl.var_size for nl in self.nodes])]
        ).astype(np.int64)
        self.row_offsets = np.concatenate(
            [[0], np.cumsum([nl.m for nl in self.nodes])]
        ).astype(np.int64)
        self.n_vars = int(self.var_offsets[-1])
        self.n_rows = int(self.row_offsets[-1])
        self.n_slacks = sum(nl.n_s for nl in self.nodes)
        # lookups keyed by absolute node so values can move across windows
        self.row_map = {}
        self.slack_map = {}
        pos = 0
        for k, nl in enumerate(self.nodes):
            r0 = int(self.row_offsets[k])
            for fam, leg, off, ln in nl.row_segs:
                self.row_map[(nl.j, fam, leg)] = (r0 + off, ln)
            for fam, leg, off, ln in nl.slack_segs:
                self.slack_map[(nl.j, fam, leg)] = (pos + off, ln)
            pos += nl.n_s

    def slack_var_indices(self):
        """Global variable indices of every slack, node-major."""
        idx = []
        for k, nl in enumerate(self.nodes):
            v0 = int(self.var_offsets[k]) + nl.s_off
            idx.extend(range(v0, v0 + nl.n_s))
        return np.asarray(idx, dtype=np.int64)


def _transfer_segments(old_map, old_vec, new_map, new_size):
    """Carry segment values keyed by (node, family, leg) across layouts."""
    out = np.zeros(new_size)
    if old_vec is None:
        return out
    for key, (start, ln) in new_map.items():
        src = old_map.get(key)
        if src is not None and src[1] == ln:
            out[start : start + ln] = old_vec[src[0] : src[0] + ln]
    return out


# ---------------------------------------------------------------------------
# preparation cache


class _NodeData:
    __slots__ = (
        "kd_jac", "face_G", "fv_jac", "h_jac", "cone_jac",
        "f_x", "f_u", "A_exp", "B_kept", "K_red", "K_full", "P",
    )


class _WindowData:
    __slots__ = (
        "layout", "structure", "hdiag", "p_template", "l_base", "u_base",
        "idx_dyn", "idx_kd", "x_idx", "x_weight",
        "u_var_idx", "u_src_idx",
        "face_groups", "fv_groups", "h_groups", "cone_groups",
        "slack_idx",
    )


class OcpPrep:
    """Per-scenario cache of reference-frozen controller data.

    Holds, per reference node: constraint Jacobians, implicit-step
    sensitivities, and the time-varying LQR gain; per window position: the
    assembled QP block structure and index tables for fast vector updates.
    One instance serves every controller variant over the same reference.
    Not thread-safe; share only across sequential solves.
    """

    def __init__(self, model, plan, reference, horizon, dt, Q, R,
                 Q_N=None, slack_weights=None):
        if horizon < 2:
            raise OcpError("horizon must be >= 2")
        self.model = model
        self.plan = plan
        self.reference = reference
        self.N = horizon
        self.dt = dt
        self.Q = np.asarray(Q, dtype=np.float64)
        self.R = np.asarray(R, dtype=np.float64)
        self.Q_N = self.Q if Q_N is None else np.asarray(Q_N, dtype=np.float64)
        self.slack_weights = slack_weights or default_slack_weights()
        self.max_start = reference.n_nodes - horizon
        if self.max_start < 0:
            raise OcpError("reference shorter than the horizon")
        self._R_ref = np.eye(3)
        self._kins = {}
        self._nodes = {}
        self._blocks = {}
        self._windows = {}

    @classmethod
    def for_definition(cls, definition):
        return cls(
            definition.model,
            definition.plan,
            definition.reference,
            definition.horizon,
            definition.dt,
            definition.Q,
            definition.R,
            Q_N=definition.Q_N,
            slack_weights=definition.slack_weights,
        )

    # -- per reference node ------------------------------------------------

    def _kin(self, j):
        kin = self._kins.get(j)
        if kin is None:
            x = self.reference.states[j]
            kin = evaluate_kinematics(
                self.model, self._R_ref,
                x[StateLayout.config], x[StateLayout.velocity],
            )
            self._kins[j] = kin
        return kin

    def node(self, j):
        nd = self._nodes.get(j)
        if nd is None:
            nd = self._build_node(j)
            self._nodes[j] = nd
        return nd

    def _build_node(self, j):
        ref = self.reference
        plan = self.plan
        x = ref.states[j]
        kin = self._kin(j)
        nd = _NodeData()
        nd.kd_jac = kinodynamic_rows(kin, x)[1]
        nd.face_G = {}
        nd.fv_jac = {}
        nd.h_jac = {}
        for leg in _stance_legs(plan.contact_state[j]):
            surf = plan.surface_of(j, leg)
            nd.face_G[leg] = linearize_contact_faces(kin, leg, surf, x).G
            J = np.zeros((3, NX))
            J[:, 9:27] = kin.foot_vel_jac[leg]
            J[:, 27:45] = kin.foot_jac[leg]
            nd.fv_jac[leg] = J
            h = np.zeros(NX)
            h[9:27] = kin.foot_jac[leg][2]
            nd.h_jac[leg] = h

        nd.cone_jac = {}
        if j < ref.n_nodes:
            u = ref.controls[j]
            for leg in _stance_legs(plan.contact_ctrl[j]):
                surf = plan.surface_of(j, leg)
                nd.cone_jac[leg] = friction_cone_jacobian(
                    u[3 * leg : 3 * leg + 3], surf.mu, surf.yaw
                )
            # dynamics Jacobians of the implicit step live at the endpoint
            x_next = ref.states[j + 1]
            _, f_x, f_u = dynamics_jacobians_from_kin(
                self.model, self._kin(j + 1), x_next, u
            )
            nd.f_x = f_x
            nd.f_u = f_u
            A, B = sensitivities_from_jacobians(f_x, f_u, self.dt)
            nd.A_exp = A
            kept = _node_layout(plan, j, has_x=True, has_u=True).kept_u
            nd.B_kept = B[:, kept]
            prev = self._nodes.get(j - 1)
            nd.P, nd.K_red = solve_dare(
                A, nd.B_kept, np.diag(self.Q),
                np.diag(self.R[kept] + _DARE_REG),
                p0=None if prev is None or prev.P is None else prev.P,
            )
            nd.K_full = np.zeros((NU, NX))
            nd.K_full[kept] = nd.K_red
        else:
            nd.f_x = None
            nd.P = None
            nd.K_full = None
        return nd

    def gain(self, j):
        """Full-width feedback gain at reference node j (zero swing rows)."""
        return self.node(j).K_full

    def sigma_schedule(self, t, noise_cov):
        """Closed-loop covariance along window t under per-step noise_cov."""
        sigma = np.zeros((NX, NX))
        out = [sigma]
        for k in range(self.N):
            nd = self.node(t + k)
            A_cl = nd.A_exp + nd.B_kept @ nd.K_red
            sigma = A_cl @ sigma @ A_cl.T + noise_cov
            sigma = 0.5 * (sigma + sigma.T)
            out.append(sigma)
        return CovarianceSchedule(out)

    # -- QP blocks ---------------------------------------------------------

    def _interior_block(self, j):
        blk = self._blocks.get(j)
        if blk is None:
            blk = self._build_interior_block(j)
            self._blocks[j] = blk
        return blk

    def _build_interior_block(self, j):
        nl = _node_layout(self.plan, j, has_x=True, has_u=True)
        nl_next = _node_layout(self.plan, j + 1, has_x=True, has_u=True)
        nd = self.node(j)
        A_local = np.zeros((nl.m, nl.var_size))
        A_next = np.zeros((nl.m, nl_next.var_size))
        A_local[0:NX, 0:NX] = -np.eye(NX)
        A_local[0:NX, nl.n_x : nl.s_off] = -self.dt * nd.f_u[:, nl.kept_u]
        A_next[0:NX, 0:NX] = np.eye(NX) - self.dt * nd.f_x
        self._fill_state_rows(nl, nd, A_local)
        self._fill_control_rows(nl, nd, A_local)
        self._fill_slack_entries(nl, A_local)
        return nl, A_local, A_next

    @staticmethod
    def _fill_state_rows(nl, nd, A_local):
        off, _ = _row_of(nl, KINODYN, -1)
        A_local[off : off + 9, 0:NX] = nd.kd_jac
        for leg in nl.stance_state:
            off, _ = _row_of(nl, FOOTVEL, leg)
            A_local[off : off + 3, 0:NX] = nd.fv_jac[leg]
            off, _ = _row_of(nl, HEIGHT, leg)
            A_local[off, 0:NX] = nd.h_jac[leg]
            off, _ = _row_of(nl, FACE, leg)
            A_local[off : off + 4, 0:NX] = nd.face_G[leg]

    @staticmethod
    def _fill_control_rows(nl, nd, A_local):
        for pos, leg in enumerate(nl.stance_ctrl):
            off, _ = _row_of(nl, CONE, leg)
            cols = slice(nl.n_x + 3 * pos, nl.n_x + 3 * pos + 3)
            A_local[off, cols] = nd.cone_jac[leg]

    @staticmethod
    def _fill_slack_entries(nl, A_local):
        # softened equalities get a +lower/-upper slack pair, inequalities a
        # single relaxing slack; trailing identity rows pin slacks >= 0
        for fam, leg, off, ln in nl.slack_segs:
            col = nl.s_off + off
            row0, _ = _row_of(nl, fam, leg)
            if fam in (KINODYN, FOOTVEL, HEIGHT):
                half = ln // 2
                for i in range(half):
                    A_local[row0 + i, col + i] = 1.0
                    A_local[row0 + i, col + half + i] = -1.0
            else:
                for i in range(ln):
                    A_local[row0 + i, col + i] = -1.0
        for i in range(nl.n_s):
            A_local[nl.m - nl.n_s + i, nl.s_off + i] = 1.0

    def _build_first_block(self, t, nl, var_next):
        """Leading node: no state increment, only controls and cone slacks."""
        nd = self.node(t)
        A_local = np.zeros((nl.m, nl.var_size))
        A_next = np.zeros((nl.m, var_next))
        A_local[0:NX, 0 : nl.n_u] = -self.dt * nd.f_u[:, nl.kept_u]
        A_next[0:NX, 0:NX] = np.eye(NX) - self.dt * nd.f_x
        self._fill_control_rows(nl, nd, A_local)
        self._fill_slack_entries(nl, A_local)
        return A_local, A_next

    def _build_terminal_block(self, j, nl):
        nd = self.node(j)
        A_local = np.zeros((nl.m, nl.var_size))
        self._fill_state_rows(nl, nd, A_local)
        self._fill_slack_entries(nl, A_local)
        return A_local

    # -- assembled windows -------------------------------------------------

    def window(self, t):
        win = self._windows.get(t)
        if win is None:
            win = self._build_window(t)
            self._windows[t] = win
        return win

    def _build_window(self, t):
        if not 0 <= t <= self.max_start:
            raise OcpError(f"window start {t} out of range [0, {self.max_start}]")
        N = self.N
        layout = _WindowLayout(self.plan, t, N)
        nodes = layout.nodes

        A_local = [None] * (N + 1)
        A_next = [None] * (N + 1)
        for k in range(1, N - 1):
            _, Al, An = self._interior_block(t + k)
            A_local[k] = Al
            A_next[k] = An
        A_local[0], A_next[0] = self._build_first_block(
            t, nodes[0], nodes[1].var_size
        )
        _, Al, An = self._interior_block(t + N - 1)
        A_local[N - 1] = Al
        # the terminal neighbour only carries state and slack columns
        last = np.zeros((Al.shape[0], nodes[N].var_size))
        last[:, 0:NX] = An[:, 0:NX]
        A_next[N - 1] = last
        A_local[N] = self._build_terminal_block(t + N, nodes[N])

        structure = QpStructure(
            var_sizes=[nl.var_size for nl in nodes],
            A_local=A_local,
            A_next=A_next,
            l=[np.zeros(nl.m) for nl in nodes],
            u=[np.zeros(nl.m) for nl in nodes],
            bound_cols=[nl.bound_cols for nl in nodes],
        )
        win = _WindowData()
        win.layout = layout
        win.structure = structure
        self._index_window(win, t)
        return win

    def _slack_weight_vectors(self, nl):
        """Per-slack (l2, l1) penalty weights in this node's slack order."""
        sw = self.slack_weights
        q = np.zeros(nl.n_s)
        p = np.zeros(nl.n_s)
        names = {FOOTVEL: "foot_velocity", HEIGHT: "height_z",
                 FACE: "face_xy", CONE: "cone"}
        for fam, leg, off, ln in nl.slack_segs:
            if fam == KINODYN:
                l1 = np.repeat(
                    [sw.kinodyn_com[0], sw.kinodyn_ang[0], sw.kinodyn_lin[0]], 3
                )
                l2 = np.repeat(
                    [sw.kinodyn_com[1], sw.kinodyn_ang[1], sw.kinodyn_lin[1]], 3
                )
                q[off : off + 18] = np.tile(l2, 2)
                p[off : off + 18] = np.tile(l1, 2)
            else:
                l1, l2 = getattr(sw, names[fam])
                q[off : off + ln] = l2
                p[off : off + ln] = l1
        return q, p

    def _index_window(self, win, t):
        """Index tables and constant vector parts for fast per-step updates."""
        layout = win.layout
        N = self.N
        nodes = layout.nodes
        ro, vo = layout.row_offsets, layout.var_offsets

        win.idx_dyn = np.stack(
            [np.arange(ro[k], ro[k] + NX) for k in range(N)]
        )
        win.idx_kd = np.stack(
            [
                np.arange(*_span(layout.row_map[(t + k, KINODYN, -1)]))
                for k in range(1, N + 1)
            ]
        )
        win.x_idx = np.stack(
            [np.arange(vo[k], vo[k] + NX) for k in range(1, N + 1)]
        )
        win.x_weight = np.vstack([np.tile(self.Q, (N - 1, 1)), self.Q_N])

        u_var = []
        u_src = []
        for k in range(N):
            nl = nodes[k]
            base = int(vo[k]) + nl.n_x
            u_var.extend(range(base, base + nl.n_u))
            u_src.extend(k * NU + nl.kept_u)
        win.u_var_idx = np.asarray(u_var, dtype=np.int64)
        win.u_src_idx = np.asarray(u_src, dtype=np.int64)

        win.face_groups = []
        win.fv_groups = []
        win.h_groups = []
        win.cone_groups = []
        for k in range(1, N + 1):
            for leg in nodes[k].stance_state:
                surf = self.plan.surface_of(t + k, leg)
                r0 = layout.row_map[(t + k, FACE, leg)][0]
                win.face_groups.append(
                    (k, leg, r0, surf, contact_face_normals(surf))
                )
                win.fv_groups.append(
                    (k, leg, layout.row_map[(t + k, FOOTVEL, leg)][0])
                )
                win.h_groups.append(
                    (k, leg, layout.row_map[(t + k, HEIGHT, leg)][0],
                     float(surf.center[2]))
                )
        for k in range(N):
            for leg in nodes[k].stance_ctrl:
                surf = self.plan.surface_of(t + k, leg)
                win.cone_groups.append(
                    (k, leg, layout.row_map[(t + k, CONE, leg)][0], surf)
                )

        win.slack_idx = layout.slack_var_indices()

        hdiag = np.full(layout.n_vars, _REG)
        p_template = np.zeros(layout.n_vars)
        for k, nl in enumerate(nodes):
            base = int(vo[k])
            if nl.has_x:
                hdiag[base : base + NX] += self.Q if k < N else self.Q_N
            if nl.has_u:
                hdiag[base + nl.n_x : base + nl.s_off] += self.R[nl.kept_u]
            if nl.n_s:
                q, p = self._slack_weight_vectors(nl)
                hdiag[base + nl.s_off : base + nl.var_size] += q
                p_template[base + nl.s_off : base + nl.var_size] = p
        win.hdiag = hdiag
        win.p_template = p_template

        # row templates: inequality rows open below, slack bounds open
        # above; equality rows get residual values scattered in per step
        l_base = np.zeros(layout.n_rows)
        u_base = np.zeros(layout.n_rows)
        for k, nl in enumerate(nodes):
            r0 = int(ro[k])
            for fam, leg, off, ln in nl.row_segs:
                if fam.startswith("bnd:"):
                    u_base[r0 + off : r0 + off + ln] = np.inf
                elif fam in (FACE, CONE):
                    l_base[r0 + off : r0 + off + ln] = -np.inf
        win.l_base = l_base
        win.u_base = u_base


def _span(entry):
    start, ln = entry
    return start, start + ln


# ---------------------------------------------------------------------------
# per-step values


def _window_values(prep, states, controls):
    """Residuals of the dynamics and consistency rows at the iterate."""
    model = prep.model
    N = prep.N
    batch = evaluate_trajectory_kinematics(
        model, prep._R_ref,
        states[1:, StateLayout.config], states[1:, StateLayout.velocity],
    )
    S1 = states[1:]

    f = np.empty((N, NX))
    f[:, 0:3] = S1[:, 3:6] / model.total_mass
    forces = controls[:, 0:12].reshape(N, 4, 3)
    f[:, 3:6] = forces.sum(axis=1)
    f[:, 5] -= model.total_mass * GRAVITY
    arms = batch.foot_pos - S1[:, None, 0:3]
    f[:, 6:9] = np.cross(arms, forces).sum(axis=1)
    f[:, 9:27] = S1[:, 27:45]
    f[:, 27:45] = controls[:, 12:30]
    r_dyn = S1 - states[:-1] - prep.dt * f

    r_kd = np.empty((N, 9))
    r_kd[:, 0:3] = S1[:, 0:3] - batch.com
    r_kd[:, 3:6] = S1[:, 6:9] - batch.momentum[:, 0:3]
    r_kd[:, 6:9] = S1[:, 3:6] - batch.momentum[:, 3:6]
    return batch, r_dyn, r_kd


def _build_window_qp(prep, win, states, controls, eta):
    """Fresh QP vectors over the cached window blocks."""
    layout = win.layout
    batch, r_dyn, r_kd = _window_values(prep, states, controls)

    l = win.l_base.copy()
    u = win.u_base.copy()
    v = -r_dyn.ravel()
    l[win.idx_dyn.ravel()] = v
    u[win.idx_dyn.ravel()] = v
    v = -r_kd.ravel()
    l[win.idx_kd.ravel()] = v
    u[win.idx_kd.ravel()] = v
    for k, leg, r0 in win.fv_groups:
        val = -batch.foot_vel[k - 1, leg]
        l[r0 : r0 + 3] = val
        u[r0 : r0 + 3] = val
    for k, leg, r0, z_c in win.h_groups:
        val = z_c - batch.foot_pos[k - 1, leg, 2]
        l[r0] = val
        u[r0] = val
    for k, leg, r0, surf, normals in win.face_groups:
        d = batch.foot_pos[k - 1, leg, 0:2] - surf.center[0:2]
        hx, hy = surf.half_extents
        res = normals @ d - np.array([hx, hx, hy, hy])
        u[r0 : r0 + 4] = -res - eta[k, leg]
    for k, leg, r0, surf in win.cone_groups:
        res = friction_cone_residual(
            controls[k, 3 * leg : 3 * leg + 3], surf.mu, surf.yaw
        )
        u[r0] = -res

    p = win.p_template.copy()
    t = layout.t
    dx = states[1:] - prep.reference.states[t + 1 : t + layout.N + 1]
    du = controls - prep.reference.controls[t : t + layout.N]
    p[win.x_idx.ravel()] = (win.x_weight * dx).ravel()
    p[win.u_var_idx] = (du * prep.R).ravel()[win.u_src_idx]

    st = win.structure
    ro = layout.row_offsets
    st.l = [l[ro[k] : ro[k + 1]] for k in range(len(layout.nodes))]
    st.u = [u[ro[k] : ro[k + 1]] for k in range(len(layout.nodes))]
    return QuadraticProgram(H=win.hdiag, p=p, structure=st)


# ---------------------------------------------------------------------------
# tightening schedules


def _mode_backoffs(definition, prep, t):
    """BackoffSchedule (horizon+1, legs, faces) for window t, cached."""
    cached = definition._eta_cache.get(t)
    if cached is not None:
        return cached
    N = definition.horizon
    mode = definition.mode
    plan = definition.plan
    if mode.kind == "nmpc":
        sched = BackoffSchedule.zeros(N + 1, plan.n_legs)
    elif mode.kind == "hnmpc":
        eta = np.zeros((N + 1, plan.n_legs, 4))
        for k in range(1, N + 1):
            for leg in _stance_legs(plan.contact_state[t + k]):
                eta[k, leg] = mode.margin
        sched = BackoffSchedule(eta)
    else:
        if definition._noise_cov is None:
            definition._noise_cov = (
                np.zeros((NX, NX))
                if mode.disturbance is None
                else mode.disturbance.state_covariance(NX)
            )
        sigmas = prep.sigma_schedule(t, definition._noise_cov)
        face_rows = {}
        for k in range(1, N + 1):
            for leg, G in prep.node(t + k).face_G.items():
                face_rows[(k, leg)] = G
        sched = compute_backoff_schedule(
            sigmas, face_rows, RiskSpec(mode.epsilon), n_legs=plan.n_legs
        )
    definition._eta_cache[t] = sched
    return sched


def _ensure_prep(definition):
    if definition.prep is None:
        definition.prep = OcpPrep.for_definition(definition)
    return definition.prep


def build_qp_subproblem(definition, iterate, backoffs=None):
    """The structured QP one control step would solve at this iterate.

    backoffs overrides the mode-derived tightening schedule; pass a
    BackoffSchedule of zeros to inspect the nominal problem.
    """
    prep = _ensure_prep(definition)
    if iterate.horizon != definition.horizon:
        raise OcpError("iterate horizon does not match the definition")
    win = prep.window(iterate.window_start)
    if backoffs is None:
        backoffs = _mode_backoffs(definition, prep, iterate.window_start)
    return _build_window_qp(prep, win, iterate.states, iterate.controls,
                            backoffs.eta)


# ---------------------------------------------------------------------------
# control steps


def rti_step(definition, iterate, measured_state):
    """One real-time iteration: linearize, solve the QP, take the full step.

    Returns (MpcSolution, next iterate).  The measured state replaces the
    head of the iterate before residual evaluation and the QP is
    warm-started from the previous duals.  If the QP solve fails, the
    stale plan is held: its feedforward plus the cached feedback gain,
    with the iterate carried over unchanged.
    """
    if isinstance(definition, LinearQuadraticOcp):
        return _rti_step_linear(definition, iterate, measured_state)
    return _rti_step_quadruped(definition, iterate, measured_state)


def _rti_step_quadruped(definition, iterate, measured_state):
    start = time.perf_counter()
    prep = _ensure_prep(definition)
    t = iterate.window_start
    win = prep.window(t)
    layout = win.layout

    states = iterate.states.copy()
    states[0] = np.asarray(measured_state, dtype=np.float64)
    controls = iterate.controls

    eta_sched = _mode_backoffs(definition, prep, t)
    qp = _build_window_qp(prep, win, states, controls, eta_sched.eta)

    warm = None
    if iterate.act_lo is not None and iterate.act_lo.shape[0] == layout.n_rows:
        warm = WarmStart(
            z=np.zeros(layout.n_vars),
            polish_first=True,
            active_lo=iterate.act_lo,
            active_hi=iterate.act_hi,
        )
    elif (iterate.row_duals is not None
            and iterate.dual_window == t
            and iterate.row_duals.shape[0] == layout.n_rows):
        warm = WarmStart(
            z=np.zeros(layout.n_vars),
            row_duals=iterate.row_duals,
            polish_first=True,
        )
    sol = solve_qp(qp, warm, definition.qp_settings)
    K0 = prep.gain(t)

    if sol.status != "solved":
        u0 = controls[0] + K0 @ (states[0] - iterate.states[0])
        solution = MpcSolution(
            states=states,
            controls=controls.copy(),
            u0=u0,
            K0=K0,
            status=f"held (qp {sol.status})",
            qp_status=sol.status,
            qp_iterations=sol.iterations,
            solve_time=time.perf_counter() - start,
            backoffs=eta_sched,
            slack_max=(
                float(np.max(iterate.slacks))
                if iterate.slacks is not None and iterate.slacks.size
                else 0.0
            ),
        )
        next_iterate = SqpIterate(
            states=states,
            controls=controls.copy(),
            slacks=iterate.slacks,
            row_duals=iterate.row_duals,
            window_start=t,
            dual_window=iterate.dual_window,
            act_lo=iterate.act_lo,
            act_hi=iterate.act_hi,
        )
        return solution, next_iterate

    z = sol.z
    new_states = states.copy()
    new_states[1:] += z[win.x_idx]
    du = np.zeros(layout.N * NU)
    du[win.u_src_idx] = z[win.u_var_idx]
    new_controls = controls + du.reshape(layout.N, NU)
    slacks = np.maximum(z[win.slack_idx], 0.0)

    next_iterate = SqpIterate(
        states=new_states,
        controls=new_controls,
        slacks=slacks,
        row_duals=sol.row_duals,
        window_start=t,
        dual_window=t,
        act_lo=sol.active_lo,
        act_hi=sol.active_hi,
    )
    solution = MpcSolution(
        states=new_states,
        controls=new_controls,
        u0=new_controls[0].copy(),
        K0=K0,
        status="solved",
        qp_status=sol.status,
        qp_iterations=sol.iterations,
        solve_time=time.perf_counter() - start,
        backoffs=eta_sched,
        slack_max=float(slacks.max()) if slacks.size else 0.0,
    )
    return solution, next_iterate


def warm_start_shift(iterate, plan, reference=None):
    """Advance an iterate one node: shift the plan, re-key slacks and duals.

    The appended tail node comes from the reference when one is given and
    still covers it, otherwise the last node is repeated (with swing-leg
    forces zeroed for the new tail interval).  Slack values and row duals
    are carried over by (node, family, leg) so the warm start survives
    contact-set changes; unmatched segments start at zero.
    """
    t_new = iterate.window_start + 1
    N = iterate.horizon
    if t_new + N > plan.n_nodes:
        raise OcpError("shifted window leaves the contact plan")

    states = np.empty_like(iterate.states)
    states[:-1] = iterate.states[1:]
    controls = np.empty_like(iterate.controls)
    controls[:-1] = iterate.controls[1:]
    if reference is not None and t_new + N <= reference.n_nodes:
        states[-1] = reference.states[t_new + N]
        controls[-1] = reference.controls[t_new + N - 1]
    else:
        states[-1] = iterate.states[-1]
        controls[-1] = iterate.controls[-1]
        gate = np.zeros(12)
        for leg in _stance_legs(plan.contact_ctrl[t_new + N - 1]):
            gate[3 * leg : 3 * leg + 3] = 1.0
        controls[-1, 0:12] *= gate

    old_layout = _WindowLayout(plan, iterate.window_start, N)
    new_layout = _WindowLayout(plan, t_new, N)
    slacks = _transfer_segments(
        old_layout.slack_map, iterate.slacks,
        new_layout.slack_map, new_layout.n_slacks,
    )
    duals = _transfer_segments(
        old_layout.row_map, iterate.row_duals,
        new_layout.row_map, new_layout.n_rows,
    )
    return SqpIterate(
        states=states,
        controls=controls,
        slacks=slacks if iterate.slacks is not None else None,
        row_duals=duals if iterate.row_duals is not None else None,
        window_start=t_new,
        dual_window=iterate.dual_window,
    )


# ---------------------------------------------------------------------------
# linear quadratic problems


def _lq_window(lq):
    """Structured QP blocks of a linear quadratic tracking problem."""
    N, nx, nu = lq.horizon, lq.nx, lq.nu
    var_sizes = [nu] + [nx + nu] * (N - 1) + [nx]
    A_local = []
    A_next = []
    bound_cols = []
    boxed = lq.lb_u is not None or lq.ub_u is not None

    for k in range(N):
        u_off = 0 if k == 0 else nx
        extra = []
        if lq.stage_ineq is not None and lq.stage_ineq[k] is not None:
            extra.append(lq.stage_ineq[k])
        n_extra = sum(np.atleast_2d(Cu).shape[0] for _, Cu, _ in extra)
        m_k = nx + n_extra + (nu if boxed else 0)
        Al = np.zeros((m_k, var_sizes[k]))
        An = np.zeros((m_k, var_sizes[k + 1]))
        if k > 0:
            Al[0:nx, 0:nx] = lq.A[k]
        Al[0:nx, u_off : u_off + nu] = lq.B[k]
        An[0:nx, 0:nx] = -np.eye(nx)
        r = nx
        for Cx, Cu, _ in extra:
            Cu = np.atleast_2d(Cu)
            q = Cu.shape[0]
            if k > 0 and Cx is not None:
                Al[r : r + q, 0:nx] = np.atleast_2d(Cx)
            Al[r : r + q, u_off : u_off + nu] = Cu
            r += q
        cols = []
        if boxed:
            for i in range(nu):
                Al[r + i, u_off + i] = 1.0
                cols.append(u_off + i)
        A_local.append(Al)
        A_next.append(An)
        bound_cols.append(cols)
    A_local.append(np.zeros((0, nx)))
    A_next.append(None)
    bound_cols.append([])
    return var_sizes, A_local, A_next, bound_cols, boxed


def _rti_step_linear(lq, iterate, measured_state):
    start = time.perf_counter()
    N, nx, nu = lq.horizon, lq.nx, lq.nu
    states = iterate.states.copy()
    states[0] = np.asarray(measured_state, dtype=np.float64)
    controls = iterate.controls

    var_sizes, A_local, A_next, bound_cols, boxed = _lq_window(lq)
    defect = (
        np.einsum("kij,kj->ki", lq.A, states[:-1])
        + np.einsum("kij,kj->ki", lq.B, controls)
        + lq.c
        - states[1:]
    )
    lb_u = np.broadcast_to(
        -np.inf if lq.lb_u is None else lq.lb_u, (N, nu)
    )
    ub_u = np.broadcast_to(
        np.inf if lq.ub_u is None else lq.ub_u, (N, nu)
    )

    l_blocks = []
    u_blocks = []
    for k in range(N):
        lk = [-defect[k]]
        uk = [-defect[k]]
        if lq.stage_ineq is not None and lq.stage_ineq[k] is not None:
            Cx, Cu, d = lq.stage_ineq[k]
            val = np.atleast_2d(Cu) @ controls[k]
            if Cx is not None:
                val = val + np.atleast_2d(Cx) @ states[k]
            lk.append(np.full(val.shape[0], -np.inf))
            uk.append(np.atleast_1d(d) - val)
        if boxed:
            lk.append(lb_u[k] - controls[k])
            uk.append(ub_u[k] - controls[k])
        l_blocks.append(np.concatenate(lk))
        u_blocks.append(np.concatenate(uk))
    l_blocks.append(np.zeros(0))
    u_blocks.append(np.zeros(0))

    structure = QpStructure(
        var_sizes=var_sizes,
        A_local=A_local,
        A_next=A_next,
        l=l_blocks,
        u=u_blocks,
        bound_cols=bound_cols,
    )
    hdiag = np.concatenate(
        [lq.R] + [np.concatenate([lq.Q, lq.R])] * (N - 1) + [lq.Q_N]
    )
    p = np.concatenate(
        [lq.R * (controls[0] - lq.u_ref[0])]
        + [
            np.concatenate(
                [
                    lq.Q * (states[k] - lq.x_ref[k]),
                    lq.R * (controls[k] - lq.u_ref[k]),
                ]
            )
            for k in range(1, N)
        ]
        + [lq.Q_N * (states[N] - lq.x_ref[N])]
    )
    qp = QuadraticProgram(H=hdiag, p=p, structure=structure)

    warm = None
    if (iterate.row_duals is not None
            and iterate.row_duals.shape[0] == structure.n_rows):
        warm = WarmStart(
            z=np.zeros(structure.n_vars),
            row_duals=iterate.row_duals,
            polish_first=True,
        )
    sol = solve_qp(qp, warm, lq.qp_settings)

    if sol.status != "solved":
        solution = MpcSolution(
            states=states,
            controls=controls.copy(),
            u0=controls[0].copy(),
            K0=None,
            status=f"held (qp {sol.status})",
            qp_status=sol.status,
            qp_iterations=sol.iterations,
            solve_time=time.perf_counter() - start,
        )
        return solution, iterate

    z = sol.z
    vo = structure.var_offsets
    new_states = states.copy()
    new_controls = controls.copy()
    new_controls[0] += z[0:nu]
    for k in range(1, N):
        base = int(vo[k])
        new_states[k] += z[base : base + nx]
        new_controls[k] += z[base + nx : base + nx + nu]
    new_states[N] += z[int(vo[N]) : int(vo[N]) + nx]

    next_iterate = SqpIterate(
        states=new_states,
        controls=new_controls,
        slacks=None,
        row_duals=sol.row_duals,
        window_start=iterate.window_start,
        dual_window=iterate.window_start,
    )
    solution = MpcSolution(
        states=new_states,
        controls=new_controls,
        u0=new_controls[0].copy(),
        K0=None,
        status="solved",
        qp_status=sol.status,
        qp_iterations=sol.iterations,
        solve_time=time.perf_counter() - start,
    )
    return solution, next_iterate
