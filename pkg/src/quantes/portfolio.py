"""Risk-level-constrained minimum-variance portfolio construction.

The allocator minimizes the portfolio's correlated-scale quadratic form
subject to two equalities: the weights sum to one, and the probability
that the portfolio return falls below its own location equals a chosen
target level. Because linear combinations of the model's return vector
stay in the asymmetric Laplace family, that probability has a closed form
in the weights and the constraint is smooth; shorting is allowed, so the
weights live in all of R^p.

The solver is an augmented Lagrangian outer loop (multiplier updates,
penalty growth by a factor of ten, at most twenty rounds) around an
unconstrained quasi-Newton inner minimizer with analytic gradients,
multi-started from the supplied initial weights plus ten deterministic
random perturbations. A short Newton polish on the constraint pair
finishes the feasibility to tolerance.
"""

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .exceptions import InfeasibleAllocationError, NumericError, ValidationError
from .mal import ALParams, al_mean, linear_combine

__all__ = [
    "AllocationResult",
    "smv_weights",
    "moment_smv_weights",
    "portfolio_risk",
    "performance_stats",
]

_BUDGET_TOL = 1e-10
_LEVEL_TOL = 1e-6
_N_PERTURB = 10
_MAX_OUTER = 20


@dataclass(frozen=True)
class AllocationResult:
    """A feasible allocation with its portfolio-level risk summary."""

    weights: np.ndarray
    tau_star_achieved: float
    objective: float
    al: ALParams
    var: float
    es: float


def _level_parts(b, a_matrix, skew_vec):
    g = float(skew_vec @ b)
    ab = a_matrix @ b
    v = float(b @ ab)
    r = np.sqrt(2.0 * v + g * g + 1e-300)
    return g, ab, v, r


def _level(b, a_matrix, skew_vec):
    g, _, _, r = _level_parts(b, a_matrix, skew_vec)
    return 0.5 * (1.0 - g / r)


def _level_grad(b, a_matrix, skew_vec):
    g, ab, v, r = _level_parts(b, a_matrix, skew_vec)
    return (g * ab - v * skew_vec) / r**3


def _solve_single(b0, a_matrix, skew_vec, tau_tilde, ones):
    lam = np.zeros(2)
    rho = 10.0
    b = np.asarray(b0, dtype=float)
    prev_norm = np.inf

    def residuals(bb):
        return np.array(
            [_level(bb, a_matrix, skew_vec) - tau_tilde, float(ones @ bb) - 1.0]
        )

    for _ in range(_MAX_OUTER):
        def objective(bb):
            c = residuals(bb)
            f = float(bb @ a_matrix @ bb)
            grad_c1 = _level_grad(bb, a_matrix, skew_vec)
            val = f + lam @ c + 0.5 * rho * float(c @ c)
            grad = (
                2.0 * (a_matrix @ bb)
                + (lam[0] + rho * c[0]) * grad_c1
                + (lam[1] + rho * c[1]) * ones
            )
            return val, grad

        res = optimize.minimize(objective, b, jac=True, method="BFGS",
                                options={"maxiter": 200, "gtol": 1e-10})
        b = res.x
        c = residuals(b)
        norm = float(np.max(np.abs(c)))
        lam = lam + rho * c
        if norm > 0.25 * prev_norm:
            rho *= 10.0
        prev_norm = norm
        if norm < 1e-9:
            break

    # Newton polish on the two constraints; least squares keeps the step
    # defined when the level gradient degenerates (symmetric levels)
    for _ in range(8):
        c = residuals(b)
        if abs(c[0]) <= 1e-12 and abs(c[1]) <= 1e-14:
            break
        j = np.vstack([_level_grad(b, a_matrix, skew_vec), ones])
        step = np.linalg.lstsq(j, c, rcond=None)[0]
        b = b - step
    c = residuals(b)
    return b, float(np.max(np.abs(c)))


def _allocate(a_matrix, skew_vec, tau_tilde, b_init, seed):
    p = a_matrix.shape[0]
    ones = np.ones(p)
    b0 = np.full(p, 1.0 / p) if b_init is None else np.asarray(b_init, dtype=float)
    if b0.shape != (p,):
        raise ValidationError("initial weights dimension does not match")
    rng = np.random.default_rng(seed)
    starts = [b0]
    for _ in range(_N_PERTURB):
        cand = b0 + rng.normal(0.0, 0.5 / np.sqrt(p), size=p)
        starts.append(cand + (1.0 - cand.sum()) / p)

    best = None
    best_residual = np.inf
    for start in starts:
        try:
            b, residual = _solve_single(start, a_matrix, skew_vec, tau_tilde, ones)
        except (FloatingPointError, np.linalg.LinAlgError):
            continue
        best_residual = min(best_residual, residual)
        level_err = abs(_level(b, a_matrix, skew_vec) - tau_tilde)
        budget_err = abs(float(ones @ b) - 1.0)
        if level_err <= _LEVEL_TOL and budget_err <= _BUDGET_TOL:
            obj = float(b @ a_matrix @ b)
            if best is None or obj < best[1]:
                best = (b, obj)
    if best is None:
        raise InfeasibleAllocationError(
            "no weight vector meets the risk-level and budget constraints",
            residual=best_residual,
        )
    return best


def smv_weights(params, tau_tilde, b_init=None, seed=0):
    """Minimum-scale weights at portfolio risk level ``tau_tilde``.

    ``params`` is the fitted distribution for the current period (location
    at the per-asset quantiles, scale from the shortfalls). The objective
    is the portfolio's quadratic scale b' D Sigma D b and the level
    constraint fixes the probability of the portfolio falling below its
    own location. Raises when no weight vector on the budget line can
    reach the target level.
    """
    tau_tilde = float(tau_tilde)
    if not 0.0 < tau_tilde <= 0.5:
        raise ValidationError("target level must lie in (0, 0.5]")
    p = params.p
    if p == 1:
        if abs(tau_tilde - float(params.tau[0])) > _LEVEL_TOL:
            raise InfeasibleAllocationError(
                "a single asset pins the portfolio level to its own tau",
                residual=abs(tau_tilde - float(params.tau[0])),
            )
        b = np.ones(1)
        al = linear_combine(b, params)
        var, es = portfolio_risk(al, tau_tilde)
        return AllocationResult(
            weights=b,
            tau_star_achieved=al.tau_star,
            objective=float(params.delta[0] ** 2 * params.sigma()[0, 0]),
            al=al,
            var=var,
            es=es,
        )

    a_matrix = params.sigma() * np.outer(params.delta, params.delta)
    skew_vec = params.delta * params.constraints.xi_tilde
    b, obj = _allocate(a_matrix, skew_vec, tau_tilde, b_init, seed)
    al = linear_combine(b, params)
    var, es = portfolio_risk(al, tau_tilde)
    return AllocationResult(
        weights=b,
        tau_star_achieved=al.tau_star,
        objective=obj,
        al=al,
        var=var,
        es=es,
    )


def moment_smv_weights(window, tau_tilde, b_init=None, seed=0):
    """Sample-moment variant of :func:`smv_weights` over a returns window.

    The correlated-scale matrix is estimated as the sample covariance
    minus the outer product of the sample mean, which is the exact
    second-moment identity of the distribution when the sample mean plays
    the skew vector's role; the same matrix enters the objective and the
    level constraint, so plugging model-implied moments back in recovers
    the model allocator. The implied portfolio location is zero, with the
    sample mean absorbed entirely into the skew term.
    """
    tau_tilde = float(tau_tilde)
    if not 0.0 < tau_tilde <= 0.5:
        raise ValidationError("target level must lie in (0, 0.5]")
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[0] <= window.shape[1]:
        raise ValidationError("window must be a T x p matrix with T > p")
    if not np.all(np.isfinite(window)):
        raise ValidationError("window contains non-finite entries")
    mean = window.mean(axis=0)
    cov = np.cov(window, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    if np.linalg.matrix_rank(cov, tol=1e-10 * float(np.abs(cov).max() or 1.0)) < cov.shape[0]:
        raise NumericError("sample covariance of the window is singular")
    a_matrix = cov - np.outer(mean, mean)
    if np.linalg.eigvalsh(a_matrix).min() <= 0.0:
        raise NumericError("sample mean dominates the covariance; scale matrix lost definiteness")

    p = window.shape[1]
    if p == 1:
        b = np.ones(1)
        g, _, v, r = _level_parts(b, a_matrix, mean)
        level = 0.5 * (1.0 - g / r)
        if abs(level - tau_tilde) > _LEVEL_TOL:
            raise InfeasibleAllocationError(
                "a single asset pins the portfolio level",
                residual=abs(level - tau_tilde),
            )
        obj = float(a_matrix[0, 0])
    else:
        b, obj = _allocate(a_matrix, mean, tau_tilde, b_init, seed)
        g, _, v, r = _level_parts(b, a_matrix, mean)
    al = ALParams(
        mu_star=0.0,
        tau_star=0.5 * (1.0 - g / r),
        delta_star=float(v / (2.0 * r)),
    )
    var, es = portfolio_risk(al, tau_tilde)
    return AllocationResult(
        weights=b,
        tau_star_achieved=al.tau_star,
        objective=obj,
        al=al,
        var=var,
        es=es,
    )


def portfolio_risk(al, tau_tilde):
    """Portfolio quantile and shortfall implied by its return distribution.

    The location is the achieved quantile by construction; the shortfall
    follows from the mean and the scale of the combined distribution.
    """
    tau_tilde = float(tau_tilde)
    if abs(al.tau_star - tau_tilde) > _LEVEL_TOL:
        raise ValidationError("distribution level does not match the requested target")
    var = float(al.mu_star)
    es = float(al_mean(al.mu_star, al.tau_star, al.delta_star) - al.delta_star / tau_tilde)
    return var, es


def performance_stats(returns, weights):
    """Mean-to-dispersion ratio of realized returns and average concentration.

    Concentration is the time-averaged sum of squared weights with each
    period's weights normalized by their absolute sum, so short positions
    count toward concentration and the result stays inside (0, 1].
    """
    returns = np.asarray(returns, dtype=float)
    if returns.ndim != 1 or returns.size == 0:
        raise ValidationError("returns must be a non-empty vector")
    if returns.size < 2:
        raise NumericError("dispersion undefined for a single period")
    sd = float(returns.std(ddof=1))
    if sd <= 0.0:
        raise NumericError("returns have zero variance")
    sharpe = float(returns.mean()) / sd

    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    norms = np.sum(np.abs(weights), axis=1)
    if np.any(norms <= 0.0):
        raise ValidationError("weights rows cannot be all zero")
    scaled = weights / norms[:, None]
    hhi = float(np.mean(np.sum(scaled**2, axis=1)))
    return sharpe, hhi
