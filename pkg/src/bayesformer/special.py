"""Scalar/array special functions: log-gamma, digamma, trigamma, regularized
incomplete gamma, incomplete beta, and the standard normal quantile.

Everything accepts floats or numpy arrays and is vectorized; scalars in give
floats out. Accuracy targets: |log_gamma - ln Gamma| < 1e-10 on [1e-3, 1e3],
digamma/trigamma to ~1e-12, incomplete gamma to ~1e-13 relative.
"""
from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Argument outside the mathematical domain of a special function."""


def _prepare(x, positive: bool, name: str):
    arr = np.asarray(x, dtype=np.float64)
    if positive and not np.all(arr > 0):
        raise DomainError(f"{name} requires strictly positive argument")
    return arr


def _maybe_scalar(arr: np.ndarray, scalar_in: bool):
    return float(arr) if scalar_in else arr


# Lanczos g=7, n=9 coefficients (Numerical Recipes / Boost); relative error
# of the reconstructed Gamma below 1e-13 over the positive axis.
_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def log_gamma(x):
    """ln Gamma(x) for x > 0 via the Lanczos approximation."""
    scalar_in = np.isscalar(x) or np.ndim(x) == 0
    x = _prepare(x, True, "log_gamma")
    # Reflection keeps the Lanczos sum on z >= 0.5.
    small = x < 0.5
    z = np.where(small, 1.0 - x, x)
    acc = np.full_like(z, _LANCZOS[0])
    for i in range(1, len(_LANCZOS)):
        acc = acc + _LANCZOS[i] / (z + i - 1.0)
    t = z + _LANCZOS_G - 0.5
    main = _HALF_LOG_2PI + (z - 0.5) * np.log(t) - t + np.log(acc)
    if np.any(small):
        with np.errstate(divide="ignore"):
            refl = np.log(np.pi / np.abs(np.sin(np.pi * np.where(small, x, 0.5)))) - main
        main = np.where(small, refl, main)
    return _maybe_scalar(main, scalar_in)


# Asymptotic tail coefficients: B_2k / (2k) for psi, B_2k for psi'.
_PSI_TAIL = (1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0,
             1.0 / 132.0, -691.0 / 32760.0, 1.0 / 12.0)
_PSI1_TAIL = (1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0,
              5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0)

_SHIFT = 8


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    scalar_in = np.isscalar(x) or np.ndim(x) == 0
    x = _prepare(x, True, "digamma")
    # psi(x) = psi(x + 8) - sum_{k<8} 1/(x+k); x+8 >= 8 is deep in the
    # asymptotic regime so the tail series is accurate to ~1e-15.
    acc = np.zeros_like(x)
    for k in range(_SHIFT):
        acc = acc + 1.0 / (x + k)
    y = x + _SHIFT
    inv2 = 1.0 / (y * y)
    tail = np.zeros_like(y)
    for c in reversed(_PSI_TAIL):
        tail = (tail + c) * inv2
    out = np.log(y) - 0.5 / y - tail - acc
    return _maybe_scalar(out, scalar_in)


def trigamma(x):
    """psi'(x) for x > 0."""
    scalar_in = np.isscalar(x) or np.ndim(x) == 0
    x = _prepare(x, True, "trigamma")
    acc = np.zeros_like(x)
    for k in range(_SHIFT):
        acc = acc + 1.0 / (x + k) ** 2
    y = x + _SHIFT
    inv2 = 1.0 / (y * y)
    tail = np.zeros_like(y)
    for c in reversed(_PSI1_TAIL):
        tail = (tail + c) * inv2
    out = 1.0 / y + 0.5 * inv2 + tail / y + acc
    return _maybe_scalar(out, scalar_in)


_MAX_ITER = 2000
_EPS = 1e-15  # just above double epsilon; 1e-16 would never converge
_TINY = 1e-300


def reg_lower_incomplete_gamma(a, x):
    """Regularized lower incomplete gamma P(a, x) for a > 0, x >= 0.

    Power series for x < a + 1, modified-Lentz continued fraction otherwise.
    """
    scalar_in = (np.isscalar(a) or np.ndim(a) == 0) and (np.isscalar(x) or np.ndim(x) == 0)
    a = _prepare(a, True, "reg_lower_incomplete_gamma")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(x >= 0):
        raise DomainError("reg_lower_incomplete_gamma requires x >= 0")
    a, x = np.broadcast_arrays(a, x)
    out = np.zeros(np.broadcast(a, x).shape, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)

    with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
        log_pref = -x + a * np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0) - log_gamma(a)

    series = (x > 0) & (x < a + 1.0)
    if np.any(series):
        aa, xx = a[series], x[series]
        term = np.full_like(aa, 1.0) / aa
        total = term.copy()
        idx = np.arange(aa.size)
        n = 0
        while idx.size and n < _MAX_ITER:
            n += 1
            t = term[idx] * xx[idx] / (aa[idx] + n)
            term[idx] = t
            total[idx] += t
            idx = idx[np.abs(t) > np.abs(total[idx]) * _EPS]
        with np.errstate(under="ignore"):
            out[series] = total * np.exp(log_pref[series])

    cf = x >= a + 1.0
    if np.any(cf):
        aa, xx = a[cf], x[cf]
        b = xx + 1.0 - aa
        c = np.full_like(aa, 1.0 / _TINY)
        d = 1.0 / np.where(np.abs(b) < _TINY, _TINY, b)
        h = d.copy()
        idx = np.arange(aa.size)
        i = 0
        while idx.size and i < _MAX_ITER:
            i += 1
            an = -i * (i - aa[idx])
            bi = b[idx] + 2.0
            b[idx] = bi
            di = an * d[idx] + bi
            di = np.where(np.abs(di) < _TINY, _TINY, di)
            ci = bi + an / c[idx]
            ci = np.where(np.abs(ci) < _TINY, _TINY, ci)
            di = 1.0 / di
            d[idx] = di
            c[idx] = ci
            delta = di * ci
            h[idx] *= delta
            idx = idx[np.abs(delta - 1.0) > _EPS]
        with np.errstate(under="ignore"):
            q = np.exp(log_pref[cf]) * h
        out[cf] = 1.0 - q

    return _maybe_scalar(out, scalar_in)


def gamma_log_pdf(z, a):
    """log density of Gamma(shape=a, rate=1) at z > 0."""
    scalar_in = (np.isscalar(z) or np.ndim(z) == 0) and (np.isscalar(a) or np.ndim(a) == 0)
    z = _prepare(z, True, "gamma_log_pdf")
    a = _prepare(a, True, "gamma_log_pdf")
    out = (a - 1.0) * np.log(z) - z - log_gamma(a)
    return _maybe_scalar(out, scalar_in)


# Acklam's rational approximation for the standard normal quantile, then one
# Halley refinement against the erf-based CDF (final error ~1e-15).
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)


def std_normal_cdf(x):
    # erfc keeps full relative precision in the lower tail.
    from scipy.special import erfc
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def std_normal_quantile(u):
    """Inverse standard normal CDF for u in (0, 1)."""
    scalar_in = np.isscalar(u) or np.ndim(u) == 0
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u > 0) & (u < 1)):
        raise DomainError("std_normal_quantile requires u in (0, 1)")
    p_low, p_high = 0.02425, 1.0 - 0.02425
    x = np.empty_like(u)

    lo = u < p_low
    hi = u > p_high
    mid = ~(lo | hi)
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if np.any(mid):
        q = u[mid] - 0.5
        r = q * q
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x[mid] = q * num / den
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(u[lo]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        x[lo] = num / den
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log(1.0 - u[hi]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        x[hi] = -num / den

    # Two Halley steps: e = Phi(x) - u, x <- x - e / (phi(x) * (1 + e*x/(2 phi))).
    for _ in range(2):
        pdf = np.maximum(np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi), 1e-300)
        err = std_normal_cdf(x) - u
        x = x - err / (pdf * (1.0 + err * x / (2.0 * pdf)))
    return _maybe_scalar(x, scalar_in)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def _betai_scalar(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * np.log(x) + b * np.log1p(-x)
    bt = np.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return float(bt * _betacf(a, b, x) / a)
    return float(1.0 - bt * _betacf(b, a, 1.0 - x) / b)


_betai_vec = np.vectorize(_betai_scalar, otypes=[np.float64])


def reg_incomplete_beta(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    scalar_in = np.isscalar(x) or np.ndim(x) == 0
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise DomainError("reg_incomplete_beta requires a, b > 0")
    out = _betai_vec(a, b, x)
    return _maybe_scalar(out, scalar_in)
