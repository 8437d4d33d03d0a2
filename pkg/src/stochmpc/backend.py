"""Kernel backend selection.

Imports the compiled kernel extension when present, otherwise falls back to
the pure-Python twin.  Set STOCHMPC_PURE_PYTHON=1 to force the fallback (the
two backends are numerically interchangeable; the compiled one is faster).
"""

import math
import os

if os.environ.get("STOCHMPC_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as kernels

Dual = kernels.Dual
RateDual = kernels.RateDual
seed_duals = kernels.seed_duals
const_duals = kernels.const_duals
seed_rate_duals = kernels.seed_rate_duals
collect_jacobian = kernels.collect_jacobian
collect_rate_jacobian = kernels.collect_rate_jacobian
bt_solve = kernels.bt_solve

AD_TYPES = (Dual, RateDual)


def backend_name():
    """Name of the active kernel backend: "compiled" or "python"."""
    return kernels.BACKEND_NAME


def sin(x):
    if isinstance(x, AD_TYPES):
        return x.sin()
    return math.sin(x)


def cos(x):
    if isinstance(x, AD_TYPES):
        return x.cos()
    return math.cos(x)


def sqrt(x):
    if isinstance(x, AD_TYPES):
        return x.sqrt()
    return math.sqrt(x)


def atan2(y, x):
    """Two-argument arctangent for floats, Duals, and RateDuals."""
    if not isinstance(y, AD_TYPES) and not isinstance(x, AD_TYPES):
        return math.atan2(y, x)
    if isinstance(y, RateDual) or isinstance(x, RateDual):
        y = _promote_rate(y, x)
        x = _promote_rate(x, y)
        val = math.atan2(y.value, x.value)
        den = x.value * x.value + y.value * y.value
        rate = (x.value * y.rate - y.value * x.rate) / den
        der = (x.value * y.der - y.value * x.der) / den
        num_der = (
            x.der * y.rate
            + x.value * y.rate_der
            - y.der * x.rate
            - y.value * x.rate_der
        )
        den_der = 2.0 * (x.value * x.der + y.value * y.der)
        rate_der = num_der / den - rate / den * den_der
        return RateDual(val, rate, der, rate_der)
    y = _promote(y, x)
    x = _promote(x, y)
    den = x.value * x.value + y.value * y.value
    return Dual(
        math.atan2(y.value, x.value),
        (x.value * y.der - y.value * x.der) / den,
    )


def _promote(v, like):
    if isinstance(v, Dual):
        return v
    return Dual(v, 0.0 * like.der)


def _promote_rate(v, like):
    if isinstance(v, RateDual):
        return v
    if isinstance(v, Dual):
        return RateDual(v.value, 0.0, v.der, 0.0 * v.der)
    z = 0.0 * like.der
    return RateDual(v, 0.0, z, z)
