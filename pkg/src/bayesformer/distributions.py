"""Distribution families, samplers, KL divergences, and the implicit
reparameterization gradient for Gamma/Dirichlet samples.

All samplers take an explicit ``numpy.random.Generator``; nothing here keeps
global state except the underflow diagnostics counter.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .special import (
    DomainError,
    digamma,
    gamma_log_pdf,
    log_gamma,
    reg_incomplete_beta,
    reg_lower_incomplete_gamma,
    std_normal_cdf,
    std_normal_quantile,
)
from .tensor import ContractError, NumericError, Tensor

_LOG_2PI = np.log(2.0 * np.pi)


class Diagnostics:
    """Counters for numerics that are clamped rather than raised."""

    def __init__(self):
        self.implicit_grad_underflows = 0

    def reset(self):
        self.implicit_grad_underflows = 0


DIAGNOSTICS = Diagnostics()


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    LOGISTIC = "logistic"
    CAUCHY = "cauchy"
    STUDENT = "student"


# -- location-scale toolkit ----------------------------------------------------


@dataclass(frozen=True)
class LocScale:
    """A location-scale family member with sampling, densities, CDF, quantile.

    Sampling is reparameterized: loc + scale * eps with eps the standard
    member, drawn by quantile transform of a uniform (Box-Muller for the
    Gaussian member).
    """

    family: Family
    loc: float = 0.0
    scale: float = 1.0
    dof: float | None = None

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError("scale must be positive")
        if self.family == Family.STUDENT:
            if self.dof is None or self.dof <= 0:
                raise DomainError("Student family needs dof > 0")
        object.__setattr__(self, "family", Family(self.family))

    # standard-member functions (loc=0, scale=1)

    def _std_log_pdf(self, z):
        f = self.family
        if f == Family.GAUSSIAN:
            return -0.5 * _LOG_2PI - 0.5 * z * z
        if f == Family.LAPLACE:
            return -np.log(2.0) - np.abs(z)
        if f == Family.LOGISTIC:
            return -z - 2.0 * np.logaddexp(0.0, -z)
        if f == Family.CAUCHY:
            return -np.log(np.pi) - np.log1p(z * z)
        nu = self.dof
        c = log_gamma((nu + 1.0) / 2.0) - log_gamma(nu / 2.0) - 0.5 * np.log(nu * np.pi)
        return c - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)

    def _std_cdf(self, z):
        f = self.family
        z = np.asarray(z, dtype=np.float64)
        if f == Family.GAUSSIAN:
            return std_normal_cdf(z)
        if f == Family.LAPLACE:
            return np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z))
        if f == Family.LOGISTIC:
            return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                            np.exp(z) / (1.0 + np.exp(z)))
        if f == Family.CAUCHY:
            return np.arctan(z) / np.pi + 0.5
        nu = self.dof
        w = nu / (nu + z * z)
        half = 0.5 * reg_incomplete_beta(nu / 2.0, 0.5, w)
        return np.where(z >= 0, 1.0 - half, half)

    def _std_quantile(self, u):
        f = self.family
        u = np.asarray(u, dtype=np.float64)
        if np.any((u <= 0) | (u >= 1)):
            raise DomainError("quantile requires u in (0, 1)")
        if f == Family.GAUSSIAN:
            return std_normal_quantile(u)
        if f == Family.LAPLACE:
            return np.where(u < 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u)))
        if f == Family.LOGISTIC:
            return np.log(u) - np.log1p(-u)
        if f == Family.CAUCHY:
            return np.tan(np.pi * (u - 0.5))
        return _student_quantile(u, self.dof)

    # public surface

    def log_pdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        return self._std_log_pdf(z) - np.log(self.scale)

    def cdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        return self._std_cdf(z)

    def quantile(self, u):
        return self.loc + self.scale * self._std_quantile(u)

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == Family.GAUSSIAN:
            eps = box_muller(rng, size)
        else:
            n = 1 if size is None else int(np.prod(size))
            u = uniform_open(rng, n if size is None else size)
            eps = self._std_quantile(u)
            if size is None:
                eps = float(np.asarray(eps).reshape(-1)[0])
        return self.loc + self.scale * eps


def box_muller(rng: np.random.Generator, size=None):
    """Standard normal via Box-Muller on open-interval uniforms."""
    scalar = size is None
    n = 1 if scalar else int(np.prod(size))
    u1 = 1.0 - rng.random(n)
    u2 = rng.random(n)
    eps = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    if scalar:
        return float(eps[0])
    return eps.reshape(size)


def uniform_open(rng: np.random.Generator, size):
    """Uniform draws guaranteed inside the open interval (0, 1)."""
    u = rng.random(size)
    tiny = np.finfo(np.float64).tiny
    return np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)


def _student_quantile(u, nu):
    u = np.asarray(u, dtype=np.float64)
    if nu == 1:
        return np.tan(np.pi * (u - 0.5))
    if nu == 2:
        al = 4.0 * u * (1.0 - u)
        return (2.0 * u - 1.0) * np.sqrt(2.0 / al)
    if nu == 4:
        al = 4.0 * u * (1.0 - u)
        q = np.cos(np.arccos(np.sqrt(al)) / 3.0) / np.sqrt(al)
        return np.sign(u - 0.5) * 2.0 * np.sqrt(q - 1.0)
    # general dof: invert I_w(nu/2, 1/2) by bisection in w, then map back
    p2 = 2.0 * np.minimum(u, 1.0 - u)
    lo = np.full_like(p2, 1e-300)
    hi = np.ones_like(p2)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = reg_incomplete_beta(nu / 2.0, 0.5, mid)
        lo = np.where(val < p2, mid, lo)
        hi = np.where(val >= p2, mid, hi)
    w = 0.5 * (lo + hi)
    t = np.sqrt(np.maximum(nu * (1.0 - w) / w, 0.0))
    return np.sign(u - 0.5) * t


# -- Gamma / Dirichlet ----------------------------------------------------------


@dataclass(frozen=True)
class GammaParams:
    alpha: float
    rate: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.rate <= 0:
            raise DomainError("Gamma parameters must be positive")


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.alpha, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise DomainError("Dirichlet needs a vector of dimension >= 2")
        if not np.all(arr > 0):
            raise DomainError("Dirichlet components must be strictly positive")
        object.__setattr__(self, "alpha", arr)

    @property
    def dim(self) -> int:
        return self.alpha.size


def sample_gamma(alpha, rng: np.random.Generator, size=None):
    """Gamma(alpha, 1) draws: Marsaglia-Tsang, with the u^(1/alpha) boost for
    alpha < 1 (applied in log space to dodge underflow)."""
    scalar = np.isscalar(alpha) and size is None
    a = np.asarray(alpha, dtype=np.float64)
    if not np.all(a > 0):
        raise DomainError("sample_gamma requires alpha > 0")
    if size is None:
        out_shape = a.shape
    else:
        out_shape = tuple(size) if np.iterable(size) else (int(size),)
    a_full = np.broadcast_to(a, out_shape).reshape(-1)
    n = a_full.size

    boost = a_full < 1.0
    d = np.where(boost, a_full + 1.0, a_full) - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    z = np.empty(n, dtype=np.float64)
    pending = np.arange(n)
    while pending.size:
        k = pending.size
        xn = rng.standard_normal(k)
        u = uniform_open(rng, k)
        dd = d[pending]
        v = (1.0 + c[pending] * xn) ** 3
        ok = v > 0
        safe_v = np.where(ok, v, 1.0)
        accept = ok & (np.log(u) < 0.5 * xn * xn + dd - dd * safe_v + dd * np.log(safe_v))
        z[pending[accept]] = dd[accept] * safe_v[accept]
        pending = pending[~accept]

    if np.any(boost):
        ub = uniform_open(rng, int(boost.sum()))
        with np.errstate(under="ignore"):
            z[boost] = z[boost] * np.exp(np.log(ub) / a_full[boost])

    z = z.reshape(out_shape)
    return float(z) if scalar else z


def implicit_gamma_grad(z, alpha):
    """dz/dalpha for a Gamma(alpha, 1) sample via the implicit identity
    -(dF/dalpha) / q_alpha(z).

    dF/dalpha uses central finite differences with one Richardson level;
    the step is tied to alpha so the relative perturbation stays uniform.
    """
    scalar = np.isscalar(z) and np.isscalar(alpha)
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    if not np.all(z > 0):
        raise DomainError("implicit_gamma_grad requires z > 0")
    if not np.all(a > 0):
        raise DomainError("implicit_gamma_grad requires alpha > 0")
    z, a = np.broadcast_arrays(z, a)

    h = np.maximum(1e-5 * a, 1e-7)
    h = np.minimum(h, 0.49 * a)

    def central(step):
        return (reg_lower_incomplete_gamma(a + step, z)
                - reg_lower_incomplete_gamma(a - step, z)) / (2.0 * step)

    d_h = central(h)
    d_h2 = central(0.5 * h)
    dfda = (4.0 * d_h2 - d_h) / 3.0

    with np.errstate(under="ignore", over="ignore"):
        q = np.exp(gamma_log_pdf(z, a))
    under = q < 1e-280
    if np.any(under):
        DIAGNOSTICS.implicit_grad_underflows += int(np.count_nonzero(under))
    with np.errstate(invalid="ignore"):
        grad = np.where(under, 0.0, -dfda / np.where(under, 1.0, q))
    grad = np.where(np.isfinite(grad), grad, 0.0)
    return float(grad) if scalar else grad


def sample_dirichlet(params: DirichletParams, rng: np.random.Generator):
    """One draw from Dirichlet(alpha) by normalizing independent Gammas."""
    z = sample_gamma(params.alpha, rng)
    s = z.sum()
    if not (s > 0):
        raise NumericError("Dirichlet sample collapsed: all Gamma draws underflowed")
    return z / s


def dirichlet_sample_t(alpha: Tensor, rng: np.random.Generator,
                       mask: np.ndarray | None = None, sampler=None) -> Tensor:
    """Differentiable Dirichlet draw over the last axis of `alpha`.

    Invalid positions (mask False) are excluded from normalization and get
    weight 0. The backward pass routes gradients to alpha through the
    normalization Jacobian and `implicit_gamma_grad` per component.
    `sampler(alpha_array) -> gammas` may be injected for deterministic tests.
    """
    a = alpha.data
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not np.all(mask.any(axis=-1)):
        raise ContractError("every Dirichlet row needs at least one valid position")
    if not np.all(a[mask] > 0):
        raise DomainError("Dirichlet components must be strictly positive")

    a_safe = np.where(mask, a, 1.0)
    z = sampler(a_safe) if sampler is not None else sample_gamma(a_safe, rng)
    zm = np.where(mask, z, 0.0)
    s = zm.sum(axis=-1, keepdims=True)
    if not np.all(s > 0):
        raise NumericError("Dirichlet sample collapsed: row of Gamma draws underflowed")
    w = zm / s

    def bwd(g):
        if alpha.requires_grad:
            # tiny-alpha draws can underflow to 0.0; clamp so the implicit
            # gradient stays defined (its value there is ~0 anyway)
            z_pos = np.maximum(np.where(mask, z, 1.0), 1e-300)
            dz = implicit_gamma_grad(z_pos, a_safe)
            inner = (g * w).sum(axis=-1, keepdims=True)
            alpha._accum(np.where(mask, (g - inner) / s * dz, 0.0))

    return Tensor._result(w, (alpha,), "dirichlet_sample", bwd)


def kl_dirichlet(p: DirichletParams, q: DirichletParams) -> float:
    """Closed-form KL(Dir(p) || Dir(q))."""
    if p.dim != q.dim:
        raise ContractError("Dirichlet KL needs equal dimensions")
    a, b = p.alpha, q.alpha
    a0, b0 = a.sum(), b.sum()
    val = (log_gamma(a0) - log_gamma(b0)
           + np.sum(log_gamma(b) - log_gamma(a))
           + np.sum((a - b) * (digamma(a) - digamma(a0))))
    if -1e-9 < val < 0.0:
        return 0.0
    return float(val)


def kl_monte_carlo(posterior, prior_log_pdf, n_samples: int, rng: np.random.Generator) -> float:
    """MC estimate of KL(q || p): mean of log q(w) - log p(w) over q-samples.

    `posterior` needs .sample(rng, size) and .log_pdf(x); `prior_log_pdf` is a
    callable. Unbiased for the true KL.
    """
    if n_samples < 1:
        raise ContractError("kl_monte_carlo needs n_samples >= 1")
    w = posterior.sample(rng, size=(n_samples,))
    w = np.asarray(w, dtype=np.float64).reshape(n_samples)
    vals = np.asarray(posterior.log_pdf(w)) - np.asarray(prior_log_pdf(w))
    if not np.all(np.isfinite(vals)):
        bad = w[~np.isfinite(vals)][0]
        raise NumericError(f"non-finite log-density in KL estimate at w={bad!r}")
    return float(vals.mean())


# -- tensor-expression log-densities (for VI objectives) ------------------------


def log_pdf_tensor(family: Family, x: Tensor, loc, scale, dof: float | None = None) -> Tensor:
    """log density of a loc-scale family as a Tensor expression.

    `loc` and `scale` may be Tensors (learned posteriors) or constants.
    """
    family = Family(family)
    loc_t = loc if isinstance(loc, Tensor) else Tensor(loc)
    scale_t = scale if isinstance(scale, Tensor) else Tensor(scale)
    z = (x - loc_t) / scale_t
    log_s = scale_t.log()
    if family == Family.GAUSSIAN:
        return (-0.5 * _LOG_2PI) - log_s - 0.5 * z * z
    if family == Family.LAPLACE:
        return (-np.log(2.0)) - log_s - z.abs()
    if family == Family.LOGISTIC:
        return -z - log_s - 2.0 * (-z).softplus()
    if family == Family.CAUCHY:
        return (-np.log(np.pi)) - log_s - (1.0 + z * z).log()
    if dof is None or dof <= 0:
        raise DomainError("Student log_pdf_tensor needs dof > 0")
    c = float(log_gamma((dof + 1.0) / 2.0) - log_gamma(dof / 2.0) - 0.5 * np.log(dof * np.pi))
    return c - log_s - ((dof + 1.0) / 2.0) * (1.0 + z * z * (1.0 / dof)).log()
