"""QP solver tests against closed forms and an active-set enumeration oracle."""

import itertools

import numpy as np
import pytest

from stochmpc.qpsolver import (
    QpSettings,
    QpStructure,
    QuadraticProgram,
    WarmStart,
    kkt_residuals,
    solve_qp,
)


def _oracle_solve(H, p, A_eq, b_eq, G, h):
    """Brute-force optimum by enumerating active subsets of G z <= h."""
    n = p.shape[0]
    me = b_eq.shape[0]
    mi = h.shape[0]
    best = None
    for r in range(mi + 1):
        for subset in itertools.combinations(range(mi), r):
            S = list(subset)
            Gs = G[S]
            ma = me + len(S)
            K = np.zeros((n + ma, n + ma))
            K[:n, :n] = H
            K[:n, n : n + me] = A_eq.T
            K[:n, n + me :] = Gs.T
            K[n : n + me, :n] = A_eq
            K[n + me :, :n] = Gs
            rhs = np.concatenate([-p, b_eq, h[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            mu = sol[n + me :]
            if np.any(mu < -1e-9):
                continue
            if np.any(G @ z - h > 1e-9):
                continue
            obj = 0.5 * z @ H @ z + p @ z
            if best is None or obj < best[0] - 1e-12:
                best = (obj, z)
    assert best is not None, "oracle found no feasible candidate"
    return best


def test_unconstrained_scalar():
    qp = QuadraticProgram(H=np.array([[1.0]]), p=np.array([-1.0]))
    sol = solve_qp(qp)
    assert sol.status == "solved"
    assert abs(sol.z[0] - 1.0) < 1e-10


def test_equality_dual_value():
    # minimize 0.5 (z1^2 + z2^2)  subject to  z1 + z2 = 1
    qp = QuadraticProgram(
        H=np.eye(2),
        p=np.zeros(2),
        A_eq=np.array([[1.0, 1.0]]),
        b_eq=np.array([1.0]),
    )
    sol = solve_qp(qp)
    assert sol.status == "solved"
    np.testing.assert_allclose(sol.z, [0.5, 0.5], atol=1e-9)
    assert abs(sol.eq_duals[0] - (-0.5)) < 1e-8


def test_upper_bound_dual_value():
    # minimize 0.5 (z - 2)^2  subject to  z <= 1; multiplier equals 1
    qp = QuadraticProgram(
        H=np.array([[1.0]]),
        p=np.array([-2.0]),
        ub=np.array([1.0]),
    )
    sol = solve_qp(qp)
    assert sol.status == "solved"
    assert abs(sol.z[0] - 1.0) < 1e-9
    assert abs(sol.ub_duals[0] - 1.0) < 1e-8


def test_inequality_dual_value():
    # same model posed as a general inequality row
    qp = QuadraticProgram(
        H=np.array([[1.0]]),
        p=np.array([-2.0]),
        A_in=np.array([[1.0]]),
        b_in=np.array([1.0]),
    )
    sol = solve_qp(qp)
    assert sol.status == "solved"
    assert abs(sol.z[0] - 1.0) < 1e-9
    assert abs(sol.in_duals[0] - 1.0) < 1e-8


def test_kkt_residuals_of_solution():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(4, 4))
    qp = QuadraticProgram(
        H=M @ M.T + np.eye(4),
        p=rng.normal(size=4),
        A_eq=rng.normal(size=(1, 4)),
        b_eq=rng.normal(size=1),
        A_in=rng.normal(size=(2, 4)),
        b_in=rng.normal(size=2) + 1.0,
        lb=np.full(4, -3.0),
        ub=np.full(4, 3.0),
    )
    sol = solve_qp(qp)
    assert sol.status == "solved"
    res = kkt_residuals(qp, sol)
    assert max(res.values()) < 1e-8


def test_random_qps_match_enumeration_oracle():
    rng = np.random.default_rng(17)
    for trial in range(40):
        n = int(rng.integers(2, 5))
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.5 * np.eye(n)
        p = rng.normal(size=n)
        z0 = rng.normal(size=n)
        me = int(rng.integers(0, 2))
        A_eq = rng.normal(size=(me, n))
        b_eq = A_eq @ z0
        mi = int(rng.integers(1, 4))
        A_in = rng.normal(size=(mi, n))
        b_in = A_in @ z0 + rng.uniform(0.0, 0.5, size=mi)
        lb = z0 - rng.uniform(0.1, 2.0, size=n)
        ub = z0 + rng.uniform(0.1, 2.0, size=n)

        qp = QuadraticProgram(
            H=H, p=p, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=lb, ub=ub
        )
        sol = solve_qp(qp)
        assert sol.status == "solved", f"trial {trial}: {sol.status}"

        G = np.vstack([A_in, np.eye(n), -np.eye(n)])
        h = np.concatenate([b_in, ub, -lb])
        obj_ref, z_ref = _oracle_solve(H, p, A_eq, b_eq, G, h)
        obj = 0.5 * sol.z @ H @ sol.z + p @ sol.z
        assert abs(obj - obj_ref) < 1e-7, f"trial {trial}"
        np.testing.assert_allclose(sol.z, z_ref, atol=5e-6)


def test_warm_start_resolve_is_cheap():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(6, 6))
    qp = QuadraticProgram(
        H=M @ M.T + np.eye(6),
        p=rng.normal(size=6),
        A_eq=rng.normal(size=(2, 6)),
        b_eq=rng.normal(size=2),
        A_in=rng.normal(size=(3, 6)),
        b_in=rng.normal(size=3),
        lb=np.full(6, -5.0),
        ub=np.full(6, 5.0),
    )
    first = solve_qp(qp)
    assert first.status == "solved"
    warm = WarmStart(z=first.z, row_duals=first.row_duals)
    second = solve_qp(qp, warm_start=warm)
    assert second.status == "solved"
    assert second.iterations <= 5
    np.testing.assert_allclose(second.z, first.z, atol=1e-7)


def test_polish_first_skips_iteration():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(5, 5))
    z0 = np.abs(rng.normal(size=5))
    A_in = rng.normal(size=(3, 5))
    qp = QuadraticProgram(
        H=M @ M.T + np.eye(5),
        p=rng.normal(size=5),
        A_in=A_in,
        b_in=A_in @ z0 + rng.uniform(0.0, 0.3, size=3),
        lb=np.zeros(5),
    )
    first = solve_qp(qp)
    assert first.status == "solved"
    warm = WarmStart(z=first.z, row_duals=first.row_duals, polish_first=True)
    second = solve_qp(qp, warm_start=warm)
    assert second.status == "solved"
    assert second.iterations == 0
    np.testing.assert_allclose(second.z, first.z, atol=1e-8)


def test_primal_infeasible_certificate():
    qp = QuadraticProgram(
        H=np.array([[1.0]]),
        p=np.zeros(1),
        A_eq=np.array([[1.0], [1.0]]),
        b_eq=np.array([1.0, 2.0]),
    )
    sol = solve_qp(qp)
    assert sol.status == "primal_infeasible"


def test_dual_infeasible_certificate():
    # minimize -z subject to z >= 0 is unbounded below
    qp = QuadraticProgram(
        H=np.zeros((1, 1)),
        p=np.array([-1.0]),
        lb=np.array([0.0]),
    )
    sol = solve_qp(qp)
    assert sol.status == "dual_infeasible"


def test_badly_scaled_problem():
    qp = QuadraticProgram(
        H=np.diag([1e6, 1e-4]),
        p=np.array([-1e6, 1e-4]),
        A_in=np.array([[1e3, 0.0], [0.0, 1e-3]]),
        b_in=np.array([5e2, 2e-3]),
    )
    sol = solve_qp(qp)
    assert sol.status == "solved"
    # first coordinate capped by its row, second unconstrained minimum
    assert abs(sol.z[0] - 0.5) < 1e-6
    assert abs(sol.z[1] - (-1.0)) < 1e-6


def _random_structured(rng, K=4):
    """Random feasible block-tridiagonal QP plus its flat equivalent."""
    var_sizes = [int(rng.integers(2, 5)) for _ in range(K)]
    offsets = np.concatenate([[0], np.cumsum(var_sizes)])
    n = int(offsets[-1])
    H = rng.uniform(0.5, 2.0, size=n)
    p = rng.normal(size=n)
    z0 = rng.normal(size=n)

    A_local = []
    A_next = []
    ls = []
    us = []
    bound_cols = []
    for k in range(K):
        w = var_sizes[k]
        rows = []
        row_l = []
        row_u = []
        n_eq = 2 if k + 1 < K else 1
        for _ in range(n_eq):
            a = rng.normal(size=w)
            rows.append(("eq", a))
        n_in = int(rng.integers(1, 3))
        for _ in range(n_in):
            a = rng.normal(size=w)
            rows.append(("in", a))
        nb = 1 if w > 2 else 0
        bcols = [int(rng.integers(0, w))] if nb else []
        Al = np.zeros((len(rows) + nb, w))
        An = np.zeros((len(rows) + nb, var_sizes[k + 1])) if k + 1 < K else None
        for i, (kind, a) in enumerate(rows):
            Al[i] = a
            if kind == "eq" and An is not None:
                An[i] = rng.normal(size=var_sizes[k + 1])
        for i, col in enumerate(bcols):
            Al[len(rows) + i, col] = 1.0
        seg = slice(offsets[k], offsets[k + 1])
        seg_next = (
            slice(offsets[k + 1], offsets[k + 2]) if k + 1 < K else None
        )
        vals = Al @ z0[seg]
        if An is not None:
            vals = vals + An @ z0[seg_next]
        for i, (kind, _) in enumerate(rows):
            if kind == "eq":
                row_l.append(vals[i])
                row_u.append(vals[i])
            else:
                row_l.append(-np.inf)
                row_u.append(vals[i] + rng.uniform(0.0, 0.4))
        for i in range(nb):
            row_l.append(z0[offsets[k] + bcols[i]] - rng.uniform(0.05, 1.0))
            row_u.append(np.inf)
        A_local.append(Al)
        A_next.append(An)
        ls.append(np.array(row_l))
        us.append(np.array(row_u))
        bound_cols.append(np.array(bcols, dtype=np.int64))

    st = QpStructure(
        var_sizes=var_sizes,
        A_local=A_local,
        A_next=A_next,
        l=ls,
        u=us,
        bound_cols=bound_cols,
    )
    structured = QuadraticProgram(H=H, p=p, structure=st)

    # flat twin: split rows into equalities, upper rows, and variable bounds
    A = st.build_csr().toarray()
    l_all = np.concatenate(ls)
    u_all = np.concatenate(us)
    eq = np.isfinite(l_all) & (l_all == u_all)
    upper = np.isfinite(u_all) & ~eq
    lower_only = ~eq & ~upper
    lb = np.full(n, -np.inf)
    for i in np.where(lower_only)[0]:
        j = int(np.argmax(np.abs(A[i])))
        lb[j] = l_all[i]
    flat = QuadraticProgram(
        H=np.diag(H),
        p=p,
        A_eq=A[eq],
        b_eq=u_all[eq],
        A_in=A[upper],
        b_in=u_all[upper],
        lb=lb,
    )
    return structured, flat


def test_structured_matches_flat_solve():
    rng = np.random.default_rng(23)
    for trial in range(6):
        structured, flat = _random_structured(rng)
        sol_s = solve_qp(structured)
        sol_f = solve_qp(flat)
        assert sol_s.status == "solved", f"trial {trial}"
        assert sol_f.status == "solved", f"trial {trial}"
        np.testing.assert_allclose(sol_s.z, sol_f.z, atol=1e-6)
        assert max(kkt_residuals(structured, sol_s).values()) < 1e-8


def test_structured_polish_first_resolve():
    rng = np.random.default_rng(31)
    structured, _ = _random_structured(rng)
    first = solve_qp(structured)
    assert first.status == "solved"
    warm = WarmStart(z=first.z, row_duals=first.row_duals, polish_first=True)
    second = solve_qp(structured, warm_start=warm)
    assert second.status == "solved"
    assert second.iterations == 0
    np.testing.assert_allclose(second.z, first.z, atol=1e-8)


def test_equality_only_structured():
    # pure equality chains solve to machine precision through the block path
    rng = np.random.default_rng(7)
    var_sizes = [3, 3, 3]
    H = rng.uniform(0.5, 2.0, size=9)
    p = rng.normal(size=9)
    z0 = rng.normal(size=9)
    A_local = []
    A_next = []
    ls = []
    us = []
    for k in range(3):
        Al = rng.normal(size=(2, 3))
        An = rng.normal(size=(2, 3)) if k < 2 else None
        val = Al @ z0[3 * k : 3 * k + 3]
        if An is not None:
            val = val + An @ z0[3 * k + 3 : 3 * k + 6]
        A_local.append(Al)
        A_next.append(An)
        ls.append(val)
        us.append(val.copy())
    st = QpStructure(var_sizes=var_sizes, A_local=A_local, A_next=A_next, l=ls, u=us)
    qp = QuadraticProgram(H=H, p=p, structure=st)
    sol = solve_qp(qp)
    assert sol.status == "solved"
    assert max(kkt_residuals(qp, sol).values()) < 1e-9


def test_settings_tolerances_respected():
    rng = np.random.default_rng(13)
    M = rng.normal(size=(8, 8))
    qp = QuadraticProgram(
        H=M @ M.T + np.eye(8),
        p=rng.normal(size=8),
        A_in=rng.normal(size=(4, 8)),
        b_in=rng.normal(size=4),
    )
    sol = solve_qp(qp, settings=QpSettings(kkt_tol=1e-10))
    assert sol.status == "solved"
    assert max(kkt_residuals(qp, sol).values()) < 1e-10
