"""Kernel twins must agree: compiled vs pure-Python duals and solves.

Both modules are imported directly, so this file tests the fallback even
when the compiled extension is active in the rest of the suite.
"""

import numpy as np
import pytest
import scipy.linalg

from stochmpc import _kernels_py

try:
    from stochmpc import _kernels

    BACKENDS = [_kernels_py, _kernels]
except ImportError:  # pragma: no cover - extension not built
    BACKENDS = [_kernels_py]


def _chain(ker, vals, rates=None):
    if rates is None:
        a, b, c = ker.seed_duals(vals, 3)
    else:
        a, b, c = ker.seed_rate_duals(vals, rates, 3)
    r1 = (a * b + 1.0) / (c + 2.0)
    r2 = (2.0 - a).sin() * b.cos() + (c * c + 0.5).sqrt()
    r3 = 1.0 / (b + 3.0) - c * 0.25 + (-a)
    r4 = (r1 - r2) * (r3 + 0.125) / (r1 * r1 + 1.0)
    return [r1, r2, r3, r4]


@pytest.mark.parametrize("ker", BACKENDS, ids=lambda k: k.BACKEND_NAME)
def test_dual_chain_matches_reference(ker):
    vals = [0.7, -0.4, 1.3]
    outs = _chain(ker, vals)
    ref = _chain(_kernels_py, vals)
    v, J = ker.collect_jacobian(outs, 3)
    v_ref, J_ref = _kernels_py.collect_jacobian(ref, 3)
    np.testing.assert_allclose(v, v_ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(J, J_ref, rtol=0, atol=1e-15)


@pytest.mark.parametrize("ker", BACKENDS, ids=lambda k: k.BACKEND_NAME)
def test_rate_dual_chain_matches_reference(ker):
    vals = [0.7, -0.4, 1.3]
    rates = [0.3, -1.1, 0.9]
    outs = _chain(ker, vals, rates)
    ref = _chain(_kernels_py, vals, rates)
    v, r, J, rJ = ker.collect_rate_jacobian(outs, 3)
    v_ref, r_ref, J_ref, rJ_ref = _kernels_py.collect_rate_jacobian(ref, 3)
    np.testing.assert_allclose(v, v_ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(r, r_ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(J, J_ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(rJ, rJ_ref, rtol=0, atol=1e-15)


@pytest.mark.parametrize("ker", BACKENDS, ids=lambda k: k.BACKEND_NAME)
def test_rate_dual_semantics_by_finite_differences(ker):
    # value/rate track f(q + t qdot) and d/dt; der/rate_der are their
    # gradients in q.  All four slots are checked against differences.
    vals = np.array([0.6, -0.3, 1.1])
    rates = np.array([0.4, 0.8, -0.5])
    h = 1e-6

    def f_all(v, r):
        outs = _chain(ker, list(v), list(r))
        return ker.collect_rate_jacobian(outs, 3)

    v0, r0, J0, rJ0 = f_all(vals, rates)
    # rate == directional derivative along rates
    vp, *_ = f_all(vals + h * rates, rates)
    vm, *_ = f_all(vals - h * rates, rates)
    np.testing.assert_allclose(r0, (vp - vm) / (2 * h), rtol=0, atol=1e-6)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        vp, rp, *_ = f_all(vals + e, rates)
        vm, rm, *_ = f_all(vals - e, rates)
        np.testing.assert_allclose(J0[:, i], (vp - vm) / (2 * h), rtol=0, atol=1e-6)
        np.testing.assert_allclose(rJ0[:, i], (rp - rm) / (2 * h), rtol=0, atol=1e-6)


@pytest.mark.parametrize("ker", BACKENDS, ids=lambda k: k.BACKEND_NAME)
def test_dual_division_and_rsub(ker):
    (a,) = ker.seed_duals([2.0], 1)
    x = 3.0 / a
    assert abs(x.value - 1.5) < 1e-15
    assert abs(x.der[0] + 0.75) < 1e-15
    y = 1.0 - a
    assert y.value == -1.0 and y.der[0] == -1.0
    assert (a > 1.5) and (a <= 2.0) and not (a < 1.0)


@pytest.mark.parametrize("ker", BACKENDS, ids=lambda k: k.BACKEND_NAME)
def test_bt_solve_against_dense(ker):
    rng = np.random.default_rng(5)
    sizes = [5, 3, 6, 2]
    K = len(sizes)
    diags = []
    offs = []
    for k, n in enumerate(sizes):
        M = rng.normal(size=(n, n))
        diags.append(M @ M.T + n * np.eye(n))
        if k + 1 < K:
            offs.append(rng.normal(size=(sizes[k + 1], n)))
    total = sum(sizes)
    dense = np.zeros((total, total))
    starts = np.cumsum([0] + sizes)
    for k, n in enumerate(sizes):
        s = starts[k]
        dense[s : s + n, s : s + n] = diags[k]
        if k + 1 < K:
            s2 = starts[k + 1]
            dense[s2 : s2 + sizes[k + 1], s : s + n] = offs[k]
            dense[s : s + n, s2 : s2 + sizes[k + 1]] = offs[k].T
    # make the whole matrix SPD, then re-extract blocks
    dense = dense + (abs(min(np.linalg.eigvalsh(dense).min(), 0.0)) + 1.0) * np.eye(total)
    for k, n in enumerate(sizes):
        s = starts[k]
        diags[k] = dense[s : s + n, s : s + n].copy()
    # block Cholesky
    chol = []
    lower = []
    prev_w = None
    for k, n in enumerate(sizes):
        D = diags[k].copy()
        if k > 0:
            D -= prev_w @ prev_w.T
        L = np.linalg.cholesky(D)
        chol.append(np.ascontiguousarray(L))
        if k + 1 < K:
            W = scipy.linalg.solve_triangular(L, offs[k].T, lower=True).T
            lower.append(np.ascontiguousarray(W))
            prev_w = W
    rhs = rng.normal(size=total)
    x = ker.bt_solve(chol, lower, np.asarray(sizes), rhs)
    x_ref = np.linalg.solve(dense, rhs)
    np.testing.assert_allclose(x, x_ref, rtol=0, atol=1e-9)


@pytest.mark.parametrize("ker", BACKENDS, ids=lambda k: k.BACKEND_NAME)
def test_bt_solve_handles_padded_blocks(ker):
    # factor blocks may be stored in larger padded arrays; only the
    # top-left sizes[k] corner is read
    rng = np.random.default_rng(9)
    sizes = [3, 2]
    D0 = np.eye(3) * 4.0
    D1 = np.eye(2) * 9.0
    E = rng.normal(size=(2, 3)) * 0.1
    dense = np.zeros((5, 5))
    dense[:3, :3] = D0
    dense[3:, 3:] = D1
    dense[3:, :3] = E
    dense[:3, 3:] = E.T
    L0 = np.linalg.cholesky(D0)
    W = scipy.linalg.solve_triangular(L0, E.T, lower=True).T
    L1 = np.linalg.cholesky(D1 - W @ W.T)
    pad = np.zeros((4, 4))
    pad[:3, :3] = L0
    padW = np.zeros((4, 4))
    padW[:2, :3] = W
    padL1 = np.zeros((4, 4))
    padL1[:2, :2] = L1
    rhs = rng.normal(size=5)
    x = ker.bt_solve([pad, padL1], [padW], np.asarray(sizes), rhs)
    np.testing.assert_allclose(x, np.linalg.solve(dense, rhs), rtol=0, atol=1e-12)
