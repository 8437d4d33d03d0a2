"""Risk/covariance/back-off oracles, including a sampled covariance check."""

import numpy as np
import pytest

from stochmpc import chance as CH
from stochmpc import constraints as C
from stochmpc import model as M

ROBOT = M.default_quadruped()
EYE3 = np.eye(3)


def test_allocate_risk_union_bound():
    assert abs(CH.allocate_risk(0.96, 4) - 0.01) < 1e-15
    assert abs(CH.allocate_risk(0.9, 8) - 0.0125) < 1e-15
    with pytest.raises(ValueError):
        CH.allocate_risk(1.2, 4)
    with pytest.raises(ValueError):
        CH.allocate_risk(0.9, 0)


def test_covariance_scalar_recursion():
    # A_cl = 0.5, unit noise: 0, 1, 1.25, ... -> 4/3
    A = [np.array([[0.3]])] * 60
    B = [np.array([[1.0]])] * 60
    K = [np.array([[0.2]])] * 60
    sig = CH.propagate_covariance(A, B, K, np.array([[1.0]]))
    assert sig[0][0, 0] == 0.0
    assert abs(sig[1][0, 0] - 1.0) < 1e-15
    assert abs(sig[2][0, 0] - 1.25) < 1e-15
    assert abs(sig[-1][0, 0] - 4.0 / 3.0) < 1e-12


def test_first_step_covariance_is_injected_noise():
    rng = np.random.default_rng(0)
    n, m = 4, 2
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    K = rng.normal(size=(m, n))
    W = rng.normal(size=(n, n))
    W = W @ W.T
    sig = CH.propagate_covariance([A], [B], [K], W)
    np.testing.assert_allclose(sig[1], W, atol=1e-12)


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(1)
    n, m = 5, 3
    As = [rng.normal(size=(n, n)) * 0.4 for _ in range(30)]
    Bs = [rng.normal(size=(n, m)) for _ in range(30)]
    Ks = [rng.normal(size=(m, n)) * 0.1 for _ in range(30)]
    W = np.diag(rng.uniform(0.1, 1.0, size=n))
    for sig in CH.propagate_covariance(As, Bs, Ks, W):
        np.testing.assert_allclose(sig, sig.T, atol=1e-12)
        assert np.linalg.eigvalsh(sig).min() > -1e-10


def test_covariance_matches_sampled_linear_rollouts():
    rng = np.random.default_rng(2)
    n, m = 3, 2
    A = rng.normal(size=(n, n))
    A *= 0.8 / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(n, m))
    _, K = __import__("stochmpc.numerics", fromlist=["solve_dare"]).solve_dare(
        A, B, np.eye(n), np.eye(m)
    )
    W = np.diag([0.3, 0.1, 0.2])
    steps = 6
    sig = CH.propagate_covariance([A] * steps, [B] * steps, [K] * steps, W)
    n_samp = 40000
    x = np.zeros((n_samp, n))
    A_cl = A + B @ K
    sqw = np.sqrt(np.diag(W))
    for k in range(steps):
        x = x @ A_cl.T + rng.normal(size=(n_samp, n)) * sqw
        if k + 1 in (1, 3, 6):
            emp = x.T @ x / n_samp
            scale = max(np.max(np.abs(sig[k + 1])), 1e-12)
            assert np.max(np.abs(emp - sig[k + 1])) / scale < 0.1


def test_backoff_frozen_value():
    # g Sigma g' = 4e-4 at eps = 0.01: 2.3263479 * 0.02
    g = np.array([1.0, 0.0])
    sigma = np.diag([4e-4, 1.0])
    eta = CH.compute_backoff(g, sigma, 0.01)
    assert abs(eta - 0.0465270) < 1e-6
    etas = CH.compute_backoffs(np.array([g, g]), sigma, 0.01)
    np.testing.assert_allclose(etas, [eta, eta], atol=1e-12)


def test_backoff_zero_cases():
    g = np.array([1.0, 2.0])
    assert CH.compute_backoff(g, np.zeros((2, 2)), 0.01) == 0.0
    assert abs(CH.compute_backoff(g, np.eye(2), 0.5)) < 1e-9


def test_backoff_monotone_in_risk():
    g = np.array([1.0, -1.0])
    sigma = np.eye(2)
    etas = [CH.compute_backoff(g, sigma, e) for e in (0.2, 0.1, 0.01, 0.001)]
    assert all(b > a for a, b in zip(etas, etas[1:]))


def test_disturbance_spec_selector():
    spec = CH.DisturbanceSpec(
        covariance=np.array([1.0, 4.0, 9.0]), selector=np.array([1.0, 0.0, 1.0])
    )
    np.testing.assert_allclose(
        spec.state_covariance(3), np.diag([1.0, 0.0, 9.0]), atol=1e-15
    )
    with pytest.raises(ValueError):
        spec.state_covariance(4)


def test_linearized_faces_first_order_accuracy():
    rng = np.random.default_rng(3)
    x = rng.normal(size=45) * 0.2
    kin = M.evaluate_kinematics(ROBOT, EYE3, x[9:27], x[27:45])
    surf = C.ContactSurface(
        center=np.array([0.2, 0.1, 0.0]), yaw=0.5, half_extents=np.array([0.05, 0.05])
    )
    lin = CH.linearize_contact_faces(kin, 2, surf, x)
    np.testing.assert_allclose(lin.G @ x - lin.offset, lin.value, atol=1e-12)
    # directional first-order check through the kinematics
    d = rng.normal(size=45) * 1e-5
    x2 = x + d
    kin2 = M.evaluate_kinematics(ROBOT, EYE3, x2[9:27], x2[27:45])
    val2 = C.contact_face_residuals(surf, kin2.foot_pos[2])
    np.testing.assert_allclose(lin.value + lin.G @ d, val2, atol=1e-9)
