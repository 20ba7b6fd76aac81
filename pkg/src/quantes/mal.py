"""Multivariate asymmetric Laplace distribution with fixed tail levels.

The distribution is parameterized so that, for a vector of probability
levels tau in (0,1)^p, each marginal's tau_j-quantile sits exactly at the
location mu_j. That pins the skew and scale shape parameters to known
functions of tau; the free parameters are the location vector, a positive
per-coordinate scale vector (the diagonal of D), and a correlation matrix
Psi mixing the coordinates.

All operations treat parameter containers as immutable values; sampling
takes an explicit seeded generator, so everything here is safe to call from
worker processes.
"""

from dataclasses import dataclass, field

import numpy as np

from .bessel import log_bessel_k
from .exceptions import DegeneratePointError, ValidationError
from .linalg import check_correlation, cholesky_with_jitter

__all__ = [
    "as_levels",
    "fixed_skew",
    "fixed_scale",
    "MALConstraints",
    "MALParams",
    "ALParams",
    "assemble_sigma",
    "mal_log_density",
    "mal_sample",
    "linear_combine",
    "implied_covariance",
    "al_log_density",
    "al_cdf",
    "al_quantile",
    "al_mean",
]


def as_levels(tau):
    """Validate and return a probability-level vector with entries in (0,1)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.ndim != 1 or tau.size == 0:
        raise ValidationError("tau must be a one-dimensional non-empty vector")
    if np.any(tau <= 0.0) or np.any(tau >= 1.0) or not np.all(np.isfinite(tau)):
        raise ValidationError("every tau level must lie strictly inside (0, 1)")
    return tau


def fixed_skew(tau):
    """Skew parameter implied by the level: (1 - 2 tau) / (tau (1 - tau))."""
    tau = np.asarray(tau, dtype=float)
    return (1.0 - 2.0 * tau) / (tau * (1.0 - tau))


def fixed_scale(tau):
    """Scale-shape parameter implied by the level: sqrt(2 / (tau (1 - tau)))."""
    tau = np.asarray(tau, dtype=float)
    return np.sqrt(2.0 / (tau * (1.0 - tau)))


@dataclass(frozen=True)
class MALConstraints:
    """Level-implied shape constants: skew vector, scale vector, Bessel order.

    Satisfies 2*sigma_tilde^2 + xi_tilde^2 = 1/(tau(1-tau))^2 elementwise,
    which is what ties the scale of the distribution to the quantile level.
    """

    tau: np.ndarray
    xi_tilde: np.ndarray
    sigma_tilde: np.ndarray
    nu: float

    @classmethod
    def from_levels(cls, tau):
        tau = as_levels(tau)
        return cls(
            tau=tau,
            xi_tilde=fixed_skew(tau),
            sigma_tilde=fixed_scale(tau),
            nu=(2.0 - tau.size) / 2.0,
        )

    @property
    def p(self):
        return self.tau.size


def assemble_sigma(psi, constraints):
    """Scale-shape matrix Lambda Psi Lambda with Lambda = diag(sigma_tilde)."""
    psi = check_correlation(psi)
    s = constraints.sigma_tilde
    if psi.shape[0] != s.size:
        raise ValidationError("psi dimension does not match the level vector")
    return psi * np.outer(s, s)


@dataclass(frozen=True)
class MALParams:
    """Full parameter set: location mu, positive scales delta, correlation psi.

    ``constraints`` is derived from ``tau`` on construction and carried along
    so downstream code never recomputes it inconsistently.
    """

    mu: np.ndarray
    delta: np.ndarray
    psi: np.ndarray
    tau: np.ndarray
    constraints: MALConstraints = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        tau = as_levels(self.tau)
        psi = check_correlation(np.atleast_2d(np.asarray(self.psi, dtype=float)))
        p = tau.size
        if mu.shape != (p,) or delta.shape != (p,) or psi.shape != (p, p):
            raise ValidationError("mu, delta, psi and tau dimensions disagree")
        if np.any(delta <= 0.0) or not np.all(np.isfinite(delta)):
            raise ValidationError("delta entries must be strictly positive and finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "constraints", MALConstraints.from_levels(tau))

    @property
    def p(self):
        return self.tau.size

    def sigma(self):
        return assemble_sigma(self.psi, self.constraints)


@dataclass(frozen=True)
class ALParams:
    """Univariate asymmetric Laplace triple produced by linear combination."""

    mu_star: float
    tau_star: float
    delta_star: float


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def mal_log_density(y, params):
    """Log density of the distribution at ``y`` (one point or rows of points).

    Parameters
    ----------
    y : array, shape (p,) or (n, p)
    params : MALParams

    Returns
    -------
    float or ndarray of shape (n,)

    Raises
    ------
    DegeneratePointError
        If a point coincides exactly with the location vector, where the
        Bessel argument is zero and the density is unbounded for p >= 2.
    """
    y = np.asarray(y, dtype=float)
    one_point = y.ndim == 1
    rows = y.reshape(1, -1) if one_point else y
    p = params.p
    if rows.shape[1] != p:
        raise ValidationError("point dimension does not match the parameter set")

    cons = params.constraints
    sigma = params.sigma()
    sigma_inv = np.linalg.inv(sigma)
    _, logdet_sigma = np.linalg.slogdet(sigma)
    xi = cons.xi_tilde
    skew = float(xi @ sigma_inv @ xi)

    v = (rows - params.mu) / params.delta
    lin = v @ (sigma_inv @ xi)
    maha = np.einsum("ti,ij,tj->t", v, sigma_inv, v)
    bad = np.where(maha <= 0.0)[0]
    if bad.size:
        raise DegeneratePointError(
            "density evaluated exactly at the location point", index=int(bad[0])
        )

    nu = cons.nu
    s = np.sqrt((2.0 + skew) * maha)
    out = (
        np.log(2.0)
        + lin
        - 0.5 * p * np.log(2.0 * np.pi)
        - np.sum(np.log(params.delta))
        - 0.5 * logdet_sigma
        + 0.5 * nu * (np.log(maha) - np.log(2.0 + skew))
        + log_bessel_k(nu, s)
    )
    return float(out[0]) if one_point else out


def mal_sample(params, n, seed):
    """Draw ``n`` vectors via the exponential scale-mixture representation.

    Y = mu + D xi W + sqrt(W) D Sigma^{1/2} Z with W ~ Exp(1), Z standard
    normal. ``seed`` is an integer or a ``numpy.random.Generator``.
    """
    if n <= 0:
        raise ValidationError("sample size must be positive")
    rng = _as_rng(seed)
    cons = params.constraints
    chol = cholesky_with_jitter(params.sigma())
    w = rng.exponential(1.0, size=n)
    z = rng.standard_normal(size=(n, params.p))
    core = w[:, None] * cons.xi_tilde + np.sqrt(w)[:, None] * (z @ chol.T)
    return params.mu + params.delta * core


def linear_combine(b, params):
    """Distribution of b'Y: an asymmetric Laplace with remapped parameters.

    Closed under linear combinations; the resulting level tau_star is the
    probability that b'Y falls below its own location mu_star.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (params.p,):
        raise ValidationError("weight vector dimension does not match parameters")
    if not np.any(b != 0.0):
        raise ValidationError("weight vector must be non-zero")
    d_xi = params.delta * params.constraints.xi_tilde
    a = params.sigma() * np.outer(params.delta, params.delta)
    g = float(b @ d_xi)
    v = float(b @ a @ b)
    if v <= 0.0:
        raise ValidationError("weight vector has zero variance under the parameters")
    root = np.sqrt(2.0 * v + g * g)
    return ALParams(
        mu_star=float(b @ params.mu),
        tau_star=0.5 * (1.0 - g / root),
        delta_star=v / (2.0 * root),
    )


def implied_covariance(params):
    """Model-implied covariance D (xi xi' + Sigma) D. Diagnostic only."""
    xi = params.constraints.xi_tilde
    inner = np.outer(xi, xi) + params.sigma()
    return inner * np.outer(params.delta, params.delta)


# -- univariate asymmetric Laplace in the check-loss parameterization --------


def _check_loss(u, tau):
    return u * (tau - (u < 0.0))


def al_log_density(y, mu, tau, delta):
    """Log density (tau(1-tau)/delta) exp(-rho_tau((y-mu)/delta)), elementwise."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0.0):
        raise ValidationError("delta must be strictly positive")
    tau = np.asarray(tau, dtype=float)
    return np.log(tau * (1.0 - tau) / delta) - _check_loss((y - mu) / delta, tau)


def al_cdf(y, mu, tau, delta):
    """Distribution function; equals tau exactly at y = mu."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    delta = np.asarray(delta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(delta <= 0.0):
        raise ValidationError("delta must be strictly positive")
    z = y - mu
    lower = tau * np.exp(np.minimum((1.0 - tau) / delta * z, 0.0))
    upper = 1.0 - (1.0 - tau) * np.exp(np.minimum(-tau / delta * z, 0.0))
    out = np.where(z <= 0.0, lower, upper)
    return float(out) if out.ndim == 0 else out


def al_quantile(u, mu, tau, delta):
    """Quantile function, the exact inverse of :func:`al_cdf` on (0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValidationError("probabilities must lie strictly inside (0, 1)")
    tau = np.asarray(tau, dtype=float)
    delta = np.asarray(delta, dtype=float)
    lower = mu + delta / (1.0 - tau) * np.log(np.minimum(u / tau, 1.0))
    upper = mu - delta / tau * np.log(np.minimum((1.0 - u) / (1.0 - tau), 1.0))
    out = np.where(u <= tau, lower, upper)
    return float(out) if out.ndim == 0 else out


def al_mean(mu, tau, delta):
    """Mean mu + delta * skew(tau) of the univariate distribution."""
    return mu + np.asarray(delta, dtype=float) * fixed_skew(tau)


def al_es(u, mu, tau, delta):
    """Lower expected shortfall E[Y | Y <= Q(u)] at an arbitrary level u.

    Closed form from integrating the quantile function; below ``tau`` the
    lower tail is exponential, above it the truncated upper branch joins in.
    At u = tau this reduces to mu - delta / (1 - tau), and as u -> 1 it
    approaches the mean.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValidationError("probabilities must lie strictly inside (0, 1)")
    tau = np.asarray(tau, dtype=float)
    delta = np.asarray(delta, dtype=float)
    lower = delta / (1.0 - tau) * (np.log(np.maximum(u, 1e-300) / tau) - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_hi = np.log(np.minimum((1.0 - u) / (1.0 - tau), 1.0))
        mixed = (delta / u) * (
            -tau / (1.0 - tau) - ((tau - u) - (1.0 - u) * log_hi) / tau
        )
    out = mu + np.where(u <= tau, lower, mixed)
    return float(out) if out.ndim == 0 else out
