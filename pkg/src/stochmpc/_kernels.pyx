# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: forward-mode dual numbers and block-tridiagonal solves.

Mirrors the public surface of stochmpc._kernels_py; see that module for the
semantics.  Derivative vectors live in raw C buffers owned by each object.
"""

from cpython.mem cimport PyMem_Malloc, PyMem_Free
from libc.math cimport sin as csin, cos as ccos, sqrt as csqrt
from libc.string cimport memcpy, memset

import numpy as np

BACKEND_NAME = "compiled"


cdef inline Dual _new_dual(int n):
    cdef Dual out = Dual.__new__(Dual)
    out.n = n
    out.d = <double*> PyMem_Malloc(n * sizeof(double))
    if out.d == NULL:
        raise MemoryError()
    return out


cdef inline RateDual _new_rate(int n):
    cdef RateDual out = RateDual.__new__(RateDual)
    out.n = n
    # one buffer: der in [0, n), rate_der in [n, 2n)
    out.d = <double*> PyMem_Malloc(2 * n * sizeof(double))
    if out.d == NULL:
        raise MemoryError()
    return out


cdef class Dual:
    cdef double v
    cdef double* d
    cdef int n

    def __cinit__(self):
        self.d = NULL
        self.n = 0

    def __init__(self, value, der):
        arr = np.ascontiguousarray(der, dtype=np.float64)
        cdef double[::1] mv = arr
        self.n = mv.shape[0]
        self.d = <double*> PyMem_Malloc(self.n * sizeof(double))
        if self.d == NULL:
            raise MemoryError()
        memcpy(self.d, &mv[0], self.n * sizeof(double))
        self.v = value

    def __dealloc__(self):
        if self.d != NULL:
            PyMem_Free(self.d)

    @property
    def value(self):
        return self.v

    @property
    def der(self):
        out = np.empty(self.n)
        cdef double[::1] mv = out
        memcpy(&mv[0], self.d, self.n * sizeof(double))
        return out

    def __repr__(self):
        return f"Dual({self.v}, {self.der})"

    def __neg__(self):
        cdef Dual a = self
        cdef Dual out = _new_dual(a.n)
        out.v = -a.v
        cdef int i
        for i in range(a.n):
            out.d[i] = -a.d[i]
        return out

    def __add__(x, y):
        cdef Dual a, b, out
        cdef double c
        cdef int i
        if isinstance(x, Dual) and isinstance(y, Dual):
            a = <Dual> x
            b = <Dual> y
            out = _new_dual(a.n)
            out.v = a.v + b.v
            for i in range(a.n):
                out.d[i] = a.d[i] + b.d[i]
            return out
        if isinstance(x, Dual):
            a = <Dual> x
            c = y
        else:
            a = <Dual> y
            c = x
        out = _new_dual(a.n)
        out.v = a.v + c
        memcpy(out.d, a.d, a.n * sizeof(double))
        return out

    def __radd__(self, y):
        return self.__add__(y)

    def __sub__(x, y):
        cdef Dual a, b, out
        cdef double c
        cdef int i
        if isinstance(x, Dual) and isinstance(y, Dual):
            a = <Dual> x
            b = <Dual> y
            out = _new_dual(a.n)
            out.v = a.v - b.v
            for i in range(a.n):
                out.d[i] = a.d[i] - b.d[i]
            return out
        if isinstance(x, Dual):
            a = <Dual> x
            c = y
            out = _new_dual(a.n)
            out.v = a.v - c
            memcpy(out.d, a.d, a.n * sizeof(double))
            return out
        a = <Dual> y
        c = x
        out = _new_dual(a.n)
        out.v = c - a.v
        for i in range(a.n):
            out.d[i] = -a.d[i]
        return out

    def __rsub__(self, y):
        cdef Dual a = self
        cdef double c = y
        cdef Dual out = _new_dual(a.n)
        out.v = c - a.v
        cdef int i
        for i in range(a.n):
            out.d[i] = -a.d[i]
        return out

    def __mul__(x, y):
        cdef Dual a, b, out
        cdef double c
        cdef int i
        if isinstance(x, Dual) and isinstance(y, Dual):
            a = <Dual> x
            b = <Dual> y
            out = _new_dual(a.n)
            out.v = a.v * b.v
            for i in range(a.n):
                out.d[i] = a.d[i] * b.v + a.v * b.d[i]
            return out
        if isinstance(x, Dual):
            a = <Dual> x
            c = y
        else:
            a = <Dual> y
            c = x
        out = _new_dual(a.n)
        out.v = a.v * c
        for i in range(a.n):
            out.d[i] = a.d[i] * c
        return out

    def __rmul__(self, y):
        return self.__mul__(y)

    def __truediv__(x, y):
        cdef Dual a, b, out
        cdef double c, inv, val
        cdef int i
        if isinstance(x, Dual) and isinstance(y, Dual):
            a = <Dual> x
            b = <Dual> y
            inv = 1.0 / b.v
            val = a.v * inv
            out = _new_dual(a.n)
            out.v = val
            for i in range(a.n):
                out.d[i] = (a.d[i] - val * b.d[i]) * inv
            return out
        if isinstance(x, Dual):
            a = <Dual> x
            inv = 1.0 / <double> y
            out = _new_dual(a.n)
            out.v = a.v * inv
            for i in range(a.n):
                out.d[i] = a.d[i] * inv
            return out
        a = <Dual> y
        c = x
        inv = 1.0 / a.v
        val = c * inv
        out = _new_dual(a.n)
        out.v = val
        for i in range(a.n):
            out.d[i] = -val * inv * a.d[i]
        return out

    def __rtruediv__(self, y):
        cdef Dual a = self
        cdef double c = y
        cdef double inv = 1.0 / a.v
        cdef double val = c * inv
        cdef Dual out = _new_dual(a.n)
        out.v = val
        cdef int i
        for i in range(a.n):
            out.d[i] = -val * inv * a.d[i]
        return out

    def sin(self):
        cdef Dual out = _new_dual(self.n)
        out.v = csin(self.v)
        cdef double c = ccos(self.v)
        cdef int i
        for i in range(self.n):
            out.d[i] = c * self.d[i]
        return out

    def cos(self):
        cdef Dual out = _new_dual(self.n)
        out.v = ccos(self.v)
        cdef double s = -csin(self.v)
        cdef int i
        for i in range(self.n):
            out.d[i] = s * self.d[i]
        return out

    def sqrt(self):
        cdef double s = csqrt(self.v)
        cdef double inv2s = 0.5 / s
        cdef Dual out = _new_dual(self.n)
        out.v = s
        cdef int i
        for i in range(self.n):
            out.d[i] = self.d[i] * inv2s
        return out

    def __lt__(self, other):
        return self.v < _val(other)

    def __le__(self, other):
        return self.v <= _val(other)

    def __gt__(self, other):
        return self.v > _val(other)

    def __ge__(self, other):
        return self.v >= _val(other)


cdef class RateDual:
    cdef double v
    cdef double r
    cdef double* d
    cdef int n

    def __cinit__(self):
        self.d = NULL
        self.n = 0

    def __init__(self, value, rate, der, rate_der):
        arr = np.ascontiguousarray(der, dtype=np.float64)
        arr2 = np.ascontiguousarray(rate_der, dtype=np.float64)
        cdef double[::1] mv = arr
        cdef double[::1] mv2 = arr2
        self.n = mv.shape[0]
        self.d = <double*> PyMem_Malloc(2 * self.n * sizeof(double))
        if self.d == NULL:
            raise MemoryError()
        memcpy(self.d, &mv[0], self.n * sizeof(double))
        memcpy(self.d + self.n, &mv2[0], self.n * sizeof(double))
        self.v = value
        self.r = rate

    def __dealloc__(self):
        if self.d != NULL:
            PyMem_Free(self.d)

    @property
    def value(self):
        return self.v

    @property
    def rate(self):
        return self.r

    @property
    def der(self):
        out = np.empty(self.n)
        cdef double[::1] mv = out
        memcpy(&mv[0], self.d, self.n * sizeof(double))
        return out

    @property
    def rate_der(self):
        out = np.empty(self.n)
        cdef double[::1] mv = out
        memcpy(&mv[0], self.d + self.n, self.n * sizeof(double))
        return out

    def __repr__(self):
        return f"RateDual({self.v}, rate={self.r})"

    def __neg__(self):
        cdef RateDual a = self
        cdef RateDual out = _new_rate(a.n)
        out.v = -a.v
        out.r = -a.r
        cdef int i
        for i in range(2 * a.n):
            out.d[i] = -a.d[i]
        return out

    def __add__(x, y):
        cdef RateDual a, b, out
        cdef double c
        cdef int i
        if isinstance(x, RateDual) and isinstance(y, RateDual):
            a = <RateDual> x
            b = <RateDual> y
            out = _new_rate(a.n)
            out.v = a.v + b.v
            out.r = a.r + b.r
            for i in range(2 * a.n):
                out.d[i] = a.d[i] + b.d[i]
            return out
        if isinstance(x, RateDual):
            a = <RateDual> x
            c = y
        else:
            a = <RateDual> y
            c = x
        out = _new_rate(a.n)
        out.v = a.v + c
        out.r = a.r
        memcpy(out.d, a.d, 2 * a.n * sizeof(double))
        return out

    def __radd__(self, y):
        return self.__add__(y)

    def __sub__(x, y):
        cdef RateDual a, b, out
        cdef double c
        cdef int i
        if isinstance(x, RateDual) and isinstance(y, RateDual):
            a = <RateDual> x
            b = <RateDual> y
            out = _new_rate(a.n)
            out.v = a.v - b.v
            out.r = a.r - b.r
            for i in range(2 * a.n):
                out.d[i] = a.d[i] - b.d[i]
            return out
        if isinstance(x, RateDual):
            a = <RateDual> x
            c = y
            out = _new_rate(a.n)
            out.v = a.v - c
            out.r = a.r
            memcpy(out.d, a.d, 2 * a.n * sizeof(double))
            return out
        a = <RateDual> y
        c = x
        out = _new_rate(a.n)
        out.v = c - a.v
        out.r = -a.r
        for i in range(2 * a.n):
            out.d[i] = -a.d[i]
        return out

    def __rsub__(self, y):
        cdef RateDual a = self
        cdef double c = y
        cdef RateDual out = _new_rate(a.n)
        out.v = c - a.v
        out.r = -a.r
        cdef int i
        for i in range(2 * a.n):
            out.d[i] = -a.d[i]
        return out

    def __mul__(x, y):
        cdef RateDual a, b, out
        cdef double c
        cdef int i, n
        if isinstance(x, RateDual) and isinstance(y, RateDual):
            a = <RateDual> x
            b = <RateDual> y
            n = a.n
            out = _new_rate(n)
            out.v = a.v * b.v
            out.r = a.r * b.v + a.v * b.r
            for i in range(n):
                out.d[i] = a.d[i] * b.v + a.v * b.d[i]
                out.d[n + i] = (
                    a.d[n + i] * b.v
                    + a.r * b.d[i]
                    + a.d[i] * b.r
                    + a.v * b.d[n + i]
                )
            return out
        if isinstance(x, RateDual):
            a = <RateDual> x
            c = y
        else:
            a = <RateDual> y
            c = x
        out = _new_rate(a.n)
        out.v = a.v * c
        out.r = a.r * c
        for i in range(2 * a.n):
            out.d[i] = a.d[i] * c
        return out

    def __rmul__(self, y):
        return self.__mul__(y)

    def __truediv__(x, y):
        cdef RateDual a, b, out
        cdef double c, inv, val, rate, de
        cdef int i, n
        if isinstance(x, RateDual) and isinstance(y, RateDual):
            a = <RateDual> x
            b = <RateDual> y
            n = a.n
            inv = 1.0 / b.v
            val = a.v * inv
            rate = (a.r - val * b.r) * inv
            out = _new_rate(n)
            out.v = val
            out.r = rate
            for i in range(n):
                de = (a.d[i] - val * b.d[i]) * inv
                out.d[i] = de
                out.d[n + i] = (
                    a.d[n + i] - rate * b.d[i] - val * b.d[n + i] - de * b.r
                ) * inv
            return out
        if isinstance(x, RateDual):
            a = <RateDual> x
            inv = 1.0 / <double> y
            out = _new_rate(a.n)
            out.v = a.v * inv
            out.r = a.r * inv
            for i in range(2 * a.n):
                out.d[i] = a.d[i] * inv
            return out
        a = <RateDual> y
        c = x
        return _rate_reciprocal(a, c)

    def __rtruediv__(self, y):
        return _rate_reciprocal(self, y)

    def sin(self):
        cdef RateDual a = self
        cdef int n = a.n
        cdef double s = csin(a.v)
        cdef double c = ccos(a.v)
        cdef RateDual out = _new_rate(n)
        out.v = s
        out.r = c * a.r
        cdef int i
        for i in range(n):
            out.d[i] = c * a.d[i]
            out.d[n + i] = c * a.d[n + i] - s * a.r * a.d[i]
        return out

    def cos(self):
        cdef RateDual a = self
        cdef int n = a.n
        cdef double s = csin(a.v)
        cdef double c = ccos(a.v)
        cdef RateDual out = _new_rate(n)
        out.v = c
        out.r = -s * a.r
        cdef int i
        for i in range(n):
            out.d[i] = -s * a.d[i]
            out.d[n + i] = -s * a.d[n + i] - c * a.r * a.d[i]
        return out

    def sqrt(self):
        cdef RateDual a = self
        cdef int n = a.n
        cdef double s = csqrt(a.v)
        cdef double inv2s = 0.5 / s
        cdef double q = a.r / (4.0 * s * s * s)
        cdef RateDual out = _new_rate(n)
        out.v = s
        out.r = a.r * inv2s
        cdef int i
        for i in range(n):
            out.d[i] = a.d[i] * inv2s
            out.d[n + i] = a.d[n + i] * inv2s - q * a.d[i]
        return out

    def __lt__(self, other):
        return self.v < _val(other)

    def __le__(self, other):
        return self.v <= _val(other)

    def __gt__(self, other):
        return self.v > _val(other)

    def __ge__(self, other):
        return self.v >= _val(other)


cdef RateDual _rate_reciprocal(RateDual a, double c):
    cdef int n = a.n
    cdef double inv = 1.0 / a.v
    cdef double val = c * inv
    cdef double rate = -val * inv * a.r
    cdef RateDual out = _new_rate(n)
    out.v = val
    out.r = rate
    cdef int i
    cdef double de
    for i in range(n):
        de = -val * inv * a.d[i]
        out.d[i] = de
        out.d[n + i] = -inv * (val * a.d[n + i] + rate * a.d[i] + de * a.r)
    return out


cdef double _val(object x):
    if isinstance(x, Dual):
        return (<Dual> x).v
    if isinstance(x, RateDual):
        return (<RateDual> x).v
    return x


def seed_duals(values, width, offset=0):
    """Identity-seeded duals: entry i gets derivative slot offset+i."""
    cdef int w = width
    cdef int off = offset
    cdef int i = 0
    out = []
    cdef Dual d
    for v in values:
        d = _new_dual(w)
        d.v = v
        memset(d.d, 0, w * sizeof(double))
        d.d[off + i] = 1.0
        out.append(d)
        i += 1
    return out


def const_duals(values, width):
    cdef int w = width
    out = []
    cdef Dual d
    for v in values:
        d = _new_dual(w)
        d.v = v
        memset(d.d, 0, w * sizeof(double))
        out.append(d)
    return out


def seed_rate_duals(values, rates, width, offset=0):
    """Identity-seeded rate duals over the same slots as seed_duals."""
    cdef int w = width
    cdef int off = offset
    cdef int i = 0
    out = []
    cdef RateDual d
    for v, r in zip(values, rates):
        d = _new_rate(w)
        d.v = v
        d.r = r
        memset(d.d, 0, 2 * w * sizeof(double))
        d.d[off + i] = 1.0
        out.append(d)
        i += 1
    return out


def collect_jacobian(outputs, width):
    """Stack values and derivative rows from a list of Dual outputs."""
    cdef int m = len(outputs)
    cdef int w = width
    vals = np.empty(m)
    jac = np.zeros((m, w))
    cdef double[::1] vv = vals
    cdef double[:, ::1] jj = jac
    cdef int i
    cdef Dual d
    for i in range(m):
        o = outputs[i]
        if isinstance(o, Dual):
            d = <Dual> o
            vv[i] = d.v
            memcpy(&jj[i, 0], d.d, w * sizeof(double))
        else:
            vv[i] = _val(o)
    return vals, jac


def collect_rate_jacobian(outputs, width):
    """Values, rates, and both Jacobians from a list of RateDual outputs."""
    cdef int m = len(outputs)
    cdef int w = width
    vals = np.empty(m)
    rates = np.zeros(m)
    jac = np.zeros((m, w))
    rate_jac = np.zeros((m, w))
    cdef double[::1] vv = vals
    cdef double[::1] rr = rates
    cdef double[:, ::1] jj = jac
    cdef double[:, ::1] rj = rate_jac
    cdef int i
    cdef RateDual d
    for i in range(m):
        o = outputs[i]
        if isinstance(o, RateDual):
            d = <RateDual> o
            vv[i] = d.v
            rr[i] = d.r
            memcpy(&jj[i, 0], d.d, w * sizeof(double))
            memcpy(&rj[i, 0], d.d + w, w * sizeof(double))
        else:
            vv[i] = _val(o)
    return vals, rates, jac, rate_jac


def bt_solve(chol_diag, lower_off, sizes, rhs):
    """Solve a block-tridiagonal SPD system from its block Cholesky factor.

    Same contract as the pure-Python twin: chol_diag[k] holds the lower
    Cholesky factor of pivot block k in its top-left sizes[k] corner,
    lower_off[k] the subdiagonal factor block W_k; rhs is stacked.
    """
    cdef int K = len(sizes)
    cdef long[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    r = np.ascontiguousarray(rhs, dtype=np.float64)
    out = r.copy()
    cdef double[::1] x = out
    cdef double[:, ::1] L
    cdef double[:, ::1] W
    cdef int k, i, j, n, npr, pos
    cdef double acc
    # forward pass: solve L y = rhs block by block, y stored in x
    pos = 0
    for k in range(K):
        n = sz[k]
        L = chol_diag[k]
        if k > 0:
            W = lower_off[k - 1]
            npr = sz[k - 1]
            for i in range(n):
                acc = 0.0
                for j in range(npr):
                    acc += W[i, j] * x[pos - npr + j]
                x[pos + i] -= acc
        for i in range(n):
            acc = x[pos + i]
            for j in range(i):
                acc -= L[i, j] * x[pos + j]
            x[pos + i] = acc / L[i, i]
        pos += n
    # backward pass: solve L^T x = y in place
    for k in range(K - 1, -1, -1):
        n = sz[k]
        pos -= n
        L = chol_diag[k]
        if k < K - 1:
            W = lower_off[k]
            npr = sz[k + 1]
            for j in range(npr):
                acc = x[pos + n + j]
                for i in range(n):
                    x[pos + i] -= W[j, i] * acc
        for i in range(n - 1, -1, -1):
            acc = x[pos + i]
            for j in range(i + 1, n):
                acc -= L[j, i] * x[pos + j]
            x[pos + i] = acc / L[i, i]
    return out
