"""Shared numerical routines: normal quantile, Riccati solver, AD Jacobians.

The standard-normal quantile is self-contained (series / continued-fraction
erf plus bisection) so results are bit-reproducible across platforms and
library versions.  The discrete-time Riccati equation is solved by running
the finite-horizon recursion to stationarity, which is robust for the
moderate problem sizes used here and warm-startable across neighbouring
linearizations.
"""

import math

import numpy as np

from .backend import collect_jacobian, seed_duals

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2 = math.sqrt(2.0)


class NumericsError(RuntimeError):
    """Raised when an iterative routine fails to converge."""


def erf(x):
    """Error function via Taylor series (|x| < 3) or continued fraction."""
    if x < 0.0:
        return -erf(-x)
    if x < 3.0:
        return _erf_series(x)
    return 1.0 - _erfc_cf(x)


def _erf_series(x):
    # erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
    term = x
    acc = x
    xx = -x * x
    n = 0
    while True:
        n += 1
        term *= xx / n
        delta = term / (2 * n + 1)
        acc += delta
        if abs(delta) < 1e-18:
            break
        if n > 200:  # pragma: no cover - series converges long before this
            raise NumericsError("erf series failed to converge")
    return 2.0 / _SQRT_PI * acc


def _erfc_cf(x):
    # erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    # evaluated by the modified Lentz scheme.
    tiny = 1e-300
    f = tiny
    c = f
    d = 0.0
    for j in range(1, 300):
        a = 1.0 if j == 1 else 0.5 * (j - 1)
        d = x + a * d
        if d == 0.0:
            d = tiny
        c = x + a / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-17:
            return math.exp(-x * x) / _SQRT_PI * f
    raise NumericsError("erfc continued fraction failed to converge")


def std_normal_cdf(x):
    """Standard normal CDF built on the local erf."""
    return 0.5 * (1.0 + erf(x / _SQRT_2))


def std_normal_quantile(p):
    """Inverse standard normal CDF by bisection on std_normal_cdf.

    Accurate to about 1e-12 in the argument; raises ValueError outside (0,1).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    lo, hi = -1.0, 1.0
    for _ in range(60):
        if std_normal_cdf(lo) < p:
            break
        lo *= 2.0
    for _ in range(60):
        if std_normal_cdf(hi) > p:
            break
        hi *= 2.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if std_normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_dare(A, B, Q, R, p0=None, tol=1e-10, max_iter=10000):
    """Discrete-time algebraic Riccati equation, stabilizing solution.

    Runs a structure-preserving doubling iteration, so convergence is
    quadratic even for slow closed-loop dynamics, then a few fixed-point
    passes P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA to polish.  p0 is
    accepted for interface stability; the doubling needs no seed.  Returns
    (P, K) with the stabilizing feedback K = -(R + B'PB)^-1 B'PA, so the
    closed loop is A + BK.  Raises NumericsError when the iteration
    diverges or the cap is hit.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    n = A.shape[0]
    eye = np.eye(n)
    At = A.T
    Bt = B.T

    Ak = A.copy()
    G = B @ np.linalg.solve(R, Bt)
    H = Q.copy()
    delta = np.inf
    converged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            W = eye + G @ H
            try:
                sol = np.linalg.solve(W, np.concatenate([Ak, G], axis=1))
            except np.linalg.LinAlgError:
                break
            MA = sol[:, :n]
            dH = Ak.T @ (H @ MA)
            dH = 0.5 * (dH + dH.T)
            H = H + dH
            G = G + Ak @ sol[:, n:] @ Ak.T
            G = 0.5 * (G + G.T)
            Ak = Ak @ MA
            if not (np.isfinite(H).all() and np.isfinite(Ak).all()):
                break
            delta = np.max(np.abs(dH))
            if delta <= tol * max(1.0, np.max(np.abs(H))):
                converged = True
                break
    if not converged:
        raise NumericsError(
            f"Riccati recursion did not converge in {max_iter} iterations "
            f"(last update {delta:.3e})"
        )

    P = H
    for _ in range(3):
        PA = P @ A
        PB = P @ B
        Gm = np.linalg.solve(R + Bt @ PB, Bt @ PA)
        P_next = Q + At @ PA - (At @ PB) @ Gm
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.max(np.abs(P_next - P))
        P = P_next
        if delta <= tol * max(1.0, np.max(np.abs(P))):
            break
    K = -np.linalg.solve(R + Bt @ P @ B, Bt @ P @ A)
    return P, K


def riccati_residual(P, A, B, Q, R):
    """Frobenius norm of P - (Q + A'PA - A'PB (R+B'PB)^-1 B'PA)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    P = np.atleast_2d(P)
    G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    res = Q + A.T @ P @ A - (A.T @ P @ B) @ G - P
    return float(np.linalg.norm(res))


def jacobian(f, x):
    """Jacobian of f at x by one forward-mode pass.

    f maps a list of scalar-like values (here: dual numbers) to a sequence
    of scalar-like outputs; returns the dense (m, n) Jacobian array.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    outs = f(seed_duals(x, n))
    _, jac = collect_jacobian(list(outs), n)
    return jac


def value_and_jacobian(f, x):
    """Like jacobian but also returns the function value array."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    outs = f(seed_duals(x, n))
    vals, jac = collect_jacobian(list(outs), n)
    return vals, jac


def finite_difference_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian used as an independent check on AD."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        fp = np.asarray(f(list(x + e)), dtype=np.float64)
        fm = np.asarray(f(list(x - e)), dtype=np.float64)
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)
