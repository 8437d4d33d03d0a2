"""Pure-Python kernels: forward-mode dual numbers and block-tridiagonal solves.

This module is the reference implementation of the hot kernels.  A compiled
twin with the same public surface lives in stochmpc._kernels; the active one
is chosen at import time by stochmpc.backend.

Dual carries a value and a vector of directional derivatives (one slot per
seed direction).  RateDual additionally carries a scalar rate (a directional
time-derivative of the value) and the seed-derivatives of that rate, which is
what velocity-bearing quantities need: one pass over the configuration
coordinates yields positions, velocities, and the Jacobians of both.
"""

import math

import numpy as np

BACKEND_NAME = "python"


class Dual:
    __slots__ = ("value", "der")

    def __init__(self, value, der):
        self.value = float(value)
        self.der = np.asarray(der, dtype=np.float64)

    def __repr__(self):
        return f"Dual({self.value}, {self.der})"

    def __neg__(self):
        return Dual(-self.value, -self.der)

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.der + other.der)
        return Dual(self.value + other, self.der)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.der - other.der)
        return Dual(self.value - other, self.der)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.der)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.der * other.value + self.value * other.der,
            )
        return Dual(self.value * other, self.der * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.value
            val = self.value * inv
            return Dual(val, (self.der - val * other.der) * inv)
        inv = 1.0 / other
        return Dual(self.value * inv, self.der * inv)

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        val = other * inv
        return Dual(val, -val * inv * self.der)

    def sin(self):
        return Dual(math.sin(self.value), math.cos(self.value) * self.der)

    def cos(self):
        return Dual(math.cos(self.value), -math.sin(self.value) * self.der)

    def sqrt(self):
        s = math.sqrt(self.value)
        return Dual(s, self.der / (2.0 * s))

    def __lt__(self, other):
        return self.value < _val(other)

    def __le__(self, other):
        return self.value <= _val(other)

    def __gt__(self, other):
        return self.value > _val(other)

    def __ge__(self, other):
        return self.value >= _val(other)


class RateDual:
    __slots__ = ("value", "rate", "der", "rate_der")

    def __init__(self, value, rate, der, rate_der):
        self.value = float(value)
        self.rate = float(rate)
        self.der = np.asarray(der, dtype=np.float64)
        self.rate_der = np.asarray(rate_der, dtype=np.float64)

    def __repr__(self):
        return f"RateDual({self.value}, rate={self.rate})"

    def __neg__(self):
        return RateDual(-self.value, -self.rate, -self.der, -self.rate_der)

    def __add__(self, other):
        if isinstance(other, RateDual):
            return RateDual(
                self.value + other.value,
                self.rate + other.rate,
                self.der + other.der,
                self.rate_der + other.rate_der,
            )
        return RateDual(self.value + other, self.rate, self.der, self.rate_der)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, RateDual):
            return RateDual(
                self.value - other.value,
                self.rate - other.rate,
                self.der - other.der,
                self.rate_der - other.rate_der,
            )
        return RateDual(self.value - other, self.rate, self.der, self.rate_der)

    def __rsub__(self, other):
        return RateDual(
            other - self.value, -self.rate, -self.der, -self.rate_der
        )

    def __mul__(self, other):
        if isinstance(other, RateDual):
            return RateDual(
                self.value * other.value,
                self.rate * other.value + self.value * other.rate,
                self.der * other.value + self.value * other.der,
                self.rate_der * other.value
                + self.rate * other.der
                + self.der * other.rate
                + self.value * other.rate_der,
            )
        return RateDual(
            self.value * other,
            self.rate * other,
            self.der * other,
            self.rate_der * other,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, RateDual):
            inv = 1.0 / other.value
            val = self.value * inv
            rate = (self.rate - val * other.rate) * inv
            der = (self.der - val * other.der) * inv
            rate_der = (
                self.rate_der
                - rate * other.der
                - val * other.rate_der
                - der * other.rate
            ) * inv
            return RateDual(val, rate, der, rate_der)
        inv = 1.0 / other
        return RateDual(
            self.value * inv, self.rate * inv, self.der * inv, self.rate_der * inv
        )

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        val = other * inv
        rate = -val * inv * self.rate
        der = -val * inv * self.der
        rate_der = -inv * (
            val * self.rate_der + rate * self.der + der * self.rate
        )
        return RateDual(val, rate, der, rate_der)

    def sin(self):
        s = math.sin(self.value)
        c = math.cos(self.value)
        return RateDual(
            s,
            c * self.rate,
            c * self.der,
            c * self.rate_der - s * self.rate * self.der,
        )

    def cos(self):
        s = math.sin(self.value)
        c = math.cos(self.value)
        return RateDual(
            c,
            -s * self.rate,
            -s * self.der,
            -s * self.rate_der - c * self.rate * self.der,
        )

    def sqrt(self):
        s = math.sqrt(self.value)
        inv2s = 0.5 / s
        rate_der = self.rate_der * inv2s - self.rate * self.der / (4.0 * s**3)
        return RateDual(s, self.rate * inv2s, self.der * inv2s, rate_der)

    def __lt__(self, other):
        return self.value < _val(other)

    def __le__(self, other):
        return self.value <= _val(other)

    def __gt__(self, other):
        return self.value > _val(other)

    def __ge__(self, other):
        return self.value >= _val(other)


def _val(x):
    return x.value if isinstance(x, (Dual, RateDual)) else x


def seed_duals(values, width, offset=0):
    """Identity-seeded duals: entry i gets derivative slot offset+i."""
    out = []
    for i, v in enumerate(values):
        der = np.zeros(width)
        der[offset + i] = 1.0
        out.append(Dual(v, der))
    return out


def const_duals(values, width):
    return [Dual(v, np.zeros(width)) for v in values]


def seed_rate_duals(values, rates, width, offset=0):
    """Identity-seeded rate duals over the same slots as seed_duals."""
    out = []
    for i, (v, r) in enumerate(zip(values, rates)):
        der = np.zeros(width)
        der[offset + i] = 1.0
        out.append(RateDual(v, r, der, np.zeros(width)))
    return out


def collect_jacobian(outputs, width):
    """Stack values and derivative rows from a list of Dual outputs."""
    m = len(outputs)
    vals = np.empty(m)
    jac = np.empty((m, width))
    for i, o in enumerate(outputs):
        if isinstance(o, (Dual, RateDual)):
            vals[i] = o.value
            jac[i] = o.der
        else:
            vals[i] = o
            jac[i] = 0.0
    return vals, jac


def collect_rate_jacobian(outputs, width):
    """Values, rates, and both Jacobians from a list of RateDual outputs."""
    m = len(outputs)
    vals = np.empty(m)
    rates = np.empty(m)
    jac = np.empty((m, width))
    rate_jac = np.empty((m, width))
    for i, o in enumerate(outputs):
        if isinstance(o, RateDual):
            vals[i] = o.value
            rates[i] = o.rate
            jac[i] = o.der
            rate_jac[i] = o.rate_der
        else:
            vals[i] = _val(o)
            rates[i] = 0.0
            jac[i] = 0.0
            rate_jac[i] = 0.0
    return vals, rates, jac, rate_jac


def bt_solve(chol_diag, lower_off, sizes, rhs):
    """Solve a block-tridiagonal SPD system from its block Cholesky factor.

    chol_diag[k] holds the lower Cholesky factor of the k-th pivot block in
    the top-left sizes[k] x sizes[k] corner (padding beyond that is ignored),
    lower_off[k] the subdiagonal factor block W_k (sizes[k+1] x sizes[k]).
    rhs is the stacked right-hand side; the solution is returned stacked.
    """
    K = len(sizes)
    segs = []
    pos = 0
    for n in sizes:
        segs.append(rhs[pos : pos + n])
        pos += n
    ys = []
    for k in range(K):
        n = sizes[k]
        r = segs[k].copy()
        if k > 0:
            r -= lower_off[k - 1][:n, : sizes[k - 1]] @ ys[k - 1]
        L = chol_diag[k][:n, :n]
        ys.append(_forward_sub(L, r))
    xs = [None] * K
    for k in range(K - 1, -1, -1):
        n = sizes[k]
        y = ys[k]
        if k < K - 1:
            y = y - lower_off[k][: sizes[k + 1], :n].T @ xs[k + 1]
        xs[k] = _backward_sub(chol_diag[k][:n, :n], y)
    return np.concatenate(xs)


def _forward_sub(L, b):
    x = b.astype(np.float64, copy=True)
    n = L.shape[0]
    for i in range(n):
        if i:
            x[i] -= L[i, :i] @ x[:i]
        x[i] /= L[i, i]
    return x


def _backward_sub(L, b):
    # solves L.T x = b
    x = b.astype(np.float64, copy=True)
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            x[i] -= L[i + 1 :, i] @ x[i + 1 :]
        x[i] /= L[i, i]
    return x
