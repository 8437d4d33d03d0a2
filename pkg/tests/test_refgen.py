"""Inverse kinematics and reference generator consistency tests."""

import numpy as np
import pytest

from stochmpc.constraints import (
    contact_face_residuals,
    friction_cone_residual,
    kinodynamic_residual,
)
from stochmpc.model import (
    ControlLayout,
    StateLayout,
    default_quadruped,
    evaluate_kinematics,
    foot_position_base,
)
from stochmpc.refgen import (
    GaitSpec,
    ReferenceError,
    build_reference,
    leg_ik,
    make_gait,
)

X = StateLayout()
U = ControlLayout()


@pytest.fixture(scope="module")
def model():
    return default_quadruped()


def test_ik_zero_configuration(model):
    # straight-down foot maps back to zero joint angles
    hip = np.array(model.hip_offsets[0])
    target = hip + np.array([0.0, 0.0, -(model.thigh_length + model.shank_length)])
    q = leg_ik(model, 0, target)
    np.testing.assert_allclose(q, 0.0, atol=1e-12)


def test_ik_right_angle_knee(model):
    # thigh down, shank folded forward: foot at hip + (-l2, 0, -l1)
    hip = np.array(model.hip_offsets[1])
    target = hip + np.array([-model.shank_length, 0.0, -model.thigh_length])
    q = leg_ik(model, 1, target)
    np.testing.assert_allclose(q, [0.0, 0.0, np.pi / 2], atol=1e-12)


def test_ik_fk_roundtrip(model):
    rng = np.random.default_rng(4)
    for _ in range(200):
        leg = int(rng.integers(0, 4))
        q_true = np.array(
            [
                rng.uniform(-0.6, 0.6),
                rng.uniform(-0.9, 0.9),
                rng.uniform(0.05, 2.4),
            ]
        )
        foot = foot_position_base(model, leg, q_true)
        q = leg_ik(model, leg, foot)
        # positions always roundtrip; angles only when the foot stays below
        # the hip plane, where the branch is unambiguous
        foot2 = foot_position_base(model, leg, q)
        np.testing.assert_allclose(foot2, foot, atol=1e-9)
        if foot[2] < -0.02:
            np.testing.assert_allclose(q, q_true, atol=1e-9)


def test_ik_out_of_reach_raises(model):
    with pytest.raises(ReferenceError):
        leg_ik(model, 0, np.array(model.hip_offsets[0]) + np.array([0.5, 0.0, -0.2]))


def test_gait_presets():
    trot = make_gait("trot")
    assert trot.swing_sequence == ((0, 3), (1, 2))
    bound = make_gait("bound", stride=0.06)
    assert bound.swing_sequence == ((0, 1), (2, 3))
    assert bound.stride == 0.06
    with pytest.raises(ReferenceError):
        make_gait("gallop")


@pytest.fixture(scope="module")
def trot_ref(model):
    gait = make_gait("trot", n_cycles=2)
    return gait, build_reference(model, gait, dt=0.01, tail_nodes=20)


def test_reference_shapes_and_schedule(model, trot_ref):
    gait, ref = trot_ref
    T = ref.n_nodes
    assert ref.states.shape == (T + 1, 45)
    assert ref.controls.shape == (T, 30)
    assert T == gait.lead_in_nodes + gait.n_cycles * gait.cycle_nodes + 20
    # lead-in and tail are full stance
    assert ref.contact_state[: gait.lead_in_nodes + 1].all()
    assert ref.contact_state[-20:].all()
    # each leg swings once per cycle
    for leg in range(4):
        flights = (~ref.contact_state[:, leg]).sum()
        assert flights == gait.n_cycles * (gait.swing_nodes - 1)
    np.testing.assert_array_equal(
        ref.contact_ctrl, ref.contact_state[:-1] & ref.contact_state[1:]
    )


def test_reference_kinematic_rows_exact(trot_ref):
    _, ref = trot_ref
    dt = ref.dt
    q = ref.states[:, X.config]
    v = ref.states[:, X.velocity]
    np.testing.assert_allclose(q[1:], q[:-1] + dt * v[1:], atol=1e-12)
    acc = ref.controls[:, 12:30]
    np.testing.assert_allclose(v[1:], v[:-1] + dt * acc, atol=1e-9)


def test_reference_momentum_consistency(model, trot_ref):
    _, ref = trot_ref
    for k in range(0, ref.n_nodes + 1, 7):
        res = kinodynamic_residual(model, np.eye(3), ref.states[k])
        np.testing.assert_allclose(np.asarray(res, dtype=np.float64), 0.0, atol=1e-10)


def test_reference_feet_track_stones(model, trot_ref):
    _, ref = trot_ref
    for k in range(0, ref.n_nodes + 1, 3):
        st = ref.states[k]
        kin = evaluate_kinematics(
            model, np.eye(3), st[X.config], st[X.velocity]
        )
        for leg in range(4):
            np.testing.assert_allclose(
                kin.foot_pos[leg], ref.foot_positions[k, leg], atol=1e-9
            )
            if ref.contact_state[k, leg]:
                sid = ref.surface_index[k, leg]
                stone = ref.surfaces[sid]
                np.testing.assert_allclose(
                    kin.foot_pos[leg], stone.center, atol=1e-9
                )
                faces = contact_face_residuals(stone, kin.foot_pos[leg])
                assert np.max(faces) <= 1e-9


def test_reference_swing_apex(trot_ref):
    gait, ref = trot_ref
    peak = ref.foot_positions[:, :, 2].max()
    assert abs(peak - gait.swing_height) < 0.002


def test_reference_force_balance(model, trot_ref):
    _, ref = trot_ref
    dt = ref.dt
    m = model.total_mass
    for k in range(ref.n_nodes):
        lam = [ref.controls[k, U.force(leg)] for leg in range(4)]
        for leg in range(4):
            if not ref.contact_ctrl[k, leg]:
                np.testing.assert_allclose(lam[leg], 0.0, atol=1e-12)
        total = np.sum(lam, axis=0)
        ldot = (ref.states[k + 1, X.lin_momentum] - ref.states[k, X.lin_momentum]) / dt
        np.testing.assert_allclose(
            total, ldot + np.array([0.0, 0.0, m * 9.81]), atol=1e-7
        )


def test_reference_forces_inside_cones(trot_ref):
    _, ref = trot_ref
    worst = -np.inf
    for k in range(ref.n_nodes):
        for leg in range(4):
            if ref.contact_ctrl[k, leg]:
                r = friction_cone_residual(ref.controls[k, U.force(leg)], mu=0.5)
                worst = max(worst, float(r))
    # stance forces keep a real margin inside the mu=0.5 cone
    assert worst < -1.0


def test_reference_touchdown_events(trot_ref):
    gait, ref = trot_ref
    assert len(ref.touchdowns) == gait.n_cycles * 4
    for node, leg in ref.touchdowns:
        assert not ref.contact_state[node - 1, leg]
        assert ref.contact_state[node, leg]
    for node, leg in ref.liftoffs:
        assert ref.contact_state[node - 1, leg]
        assert not ref.contact_state[node, leg]


def test_bound_reference_builds(model):
    gait = make_gait("bound", n_cycles=2)
    ref = build_reference(model, gait, dt=0.01, tail_nodes=10)
    assert ref.states.shape[1] == 45
    q = ref.states[:, X.config]
    v = ref.states[:, X.velocity]
    np.testing.assert_allclose(q[1:], q[:-1] + ref.dt * v[1:], atol=1e-12)
