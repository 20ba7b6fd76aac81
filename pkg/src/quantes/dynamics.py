"""Conditional quantile and expected-shortfall recursions.

Three quantile updates driven by lagged returns (symmetric absolute value,
asymmetric slope, indirect GARCH with the negative root) and two shortfall
links (a multiplicative factor below the quantile, and an autoregressive
offset that widens after violations). Paths are plain arrays indexed like
the input series: entry t is the one-step forecast made with information
through t-1, with entry 0 pinned to the supplied initial state.

The time loops are jitted when numba is importable and fall back to the
same Python code otherwise; either way they are pure functions of their
arguments, so paths are reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import PathError, ValidationError

try:  # pragma: no cover - exercised implicitly by every path call
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap

SAV = "sav"
AS = "as"
IG = "ig"
MULT = "mult"
AR = "ar"

KINDS = (SAV, AS, IG)
LINKS = (MULT, AR)

__all__ = [
    "SAV",
    "AS",
    "IG",
    "MULT",
    "AR",
    "CaviarSpec",
    "ESLink",
    "RiskPath",
    "quantile_step",
    "quantile_path",
    "es_path_multiplicative",
    "es_path_ar",
    "delta_from_es",
    "risk_path",
    "one_step_forecast",
    "initial_quantile",
    "initial_es_offset",
]


@dataclass(frozen=True)
class CaviarSpec:
    """Quantile recursion coefficients for one series.

    ``beta`` has two entries for the asymmetric-slope kind (positive part,
    negative part) and one entry otherwise.
    """

    kind: str
    omega: float
    eta: float
    beta: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown quantile recursion kind {self.kind!r}")
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        expected = 2 if self.kind == AS else 1
        if beta.shape != (expected,):
            raise ValidationError(
                f"kind {self.kind!r} needs {expected} beta coefficient(s)"
            )
        vals = np.array([self.omega, self.eta, *beta], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValidationError("recursion coefficients must be finite")
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class ESLink:
    """Expected-shortfall link attached to a quantile path.

    Multiplicative kind: es = (1 + exp(gamma0)) * q, steepening the quantile.
    Autoregressive kind: es = q - x with offset x >= 0 updated on violations
    from (gamma[0] + gamma[1] * (q_prev - y_prev) + gamma[2] * x_prev) and
    carried over otherwise; ``x0`` seeds the offset.
    """

    kind: str
    gamma0: float = 0.0
    gamma: np.ndarray = None
    x0: float = 0.0

    def __post_init__(self):
        if self.kind not in LINKS:
            raise ValidationError(f"unknown shortfall link kind {self.kind!r}")
        if self.kind == MULT:
            if not np.isfinite(self.gamma0):
                raise ValidationError("gamma0 must be finite")
            object.__setattr__(self, "gamma0", float(self.gamma0))
            object.__setattr__(self, "gamma", None)
        else:
            gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
            if gamma.shape != (3,):
                raise ValidationError("autoregressive link needs 3 gamma coefficients")
            if np.any(gamma < 0.0) or not np.all(np.isfinite(gamma)):
                raise ValidationError("gamma coefficients must be finite and >= 0")
            if not np.isfinite(self.x0) or self.x0 < 0.0:
                raise ValidationError("x0 must be finite and >= 0")
            object.__setattr__(self, "gamma", gamma)
            object.__setattr__(self, "x0", float(self.x0))


@dataclass(frozen=True)
class RiskPath:
    """Aligned per-period quantile, shortfall, scale and offset paths."""

    quantile: np.ndarray
    es: np.ndarray
    delta: np.ndarray
    x: np.ndarray = None


@njit(cache=True)
def _sav_loop(omega, eta, beta1, y, q0):
    q = np.empty(y.size)
    q[0] = q0
    for t in range(1, y.size):
        q[t] = omega + eta * q[t - 1] + beta1 * abs(y[t - 1])
    return q


@njit(cache=True)
def _as_loop(omega, eta, beta1, beta2, y, q0):
    q = np.empty(y.size)
    q[0] = q0
    for t in range(1, y.size):
        prev = y[t - 1]
        pos = prev if prev > 0.0 else 0.0
        neg = -prev if prev < 0.0 else 0.0
        q[t] = omega + eta * q[t - 1] + beta1 * pos + beta2 * neg
    return q


@njit(cache=True)
def _ig_loop(omega, eta, beta1, y, q0):
    # Returns the first index with a non-positive radicand, or -1 if clean.
    q = np.empty(y.size)
    q[0] = q0
    for t in range(1, y.size):
        rad = omega + eta * q[t - 1] * q[t - 1] + beta1 * y[t - 1] * y[t - 1]
        if rad <= 0.0:
            return q, t
        q[t] = -np.sqrt(rad)
    return q, -1


@njit(cache=True)
def _ar_offset_loop(g1, g2, g3, q, y, x0):
    x = np.empty(y.size)
    x[0] = x0
    for t in range(1, y.size):
        if y[t] <= q[t]:
            val = g1 + g2 * (q[t - 1] - y[t - 1]) + g3 * x[t - 1]
            x[t] = val if val > 0.0 else 0.0
        else:
            x[t] = x[t - 1]
    return x


def quantile_step(spec, q_prev, y_prev):
    """One recursion step: the quantile for the next period."""
    if spec.kind == SAV:
        return spec.omega + spec.eta * q_prev + spec.beta[0] * abs(y_prev)
    if spec.kind == AS:
        return (
            spec.omega
            + spec.eta * q_prev
            + spec.beta[0] * max(y_prev, 0.0)
            + spec.beta[1] * max(-y_prev, 0.0)
        )
    rad = spec.omega + spec.eta * q_prev**2 + spec.beta[0] * y_prev**2
    if rad <= 0.0:
        raise PathError("negative radicand in indirect-GARCH step")
    return -np.sqrt(rad)


def quantile_path(spec, y, q0):
    """Full quantile path along ``y`` starting from ``q0``."""
    y = np.ascontiguousarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValidationError("returns must be a non-empty vector")
    if spec.kind == SAV:
        q = _sav_loop(spec.omega, spec.eta, spec.beta[0], y, float(q0))
    elif spec.kind == AS:
        q = _as_loop(spec.omega, spec.eta, spec.beta[0], spec.beta[1], y, float(q0))
    else:
        q, bad = _ig_loop(spec.omega, spec.eta, spec.beta[0], y, float(q0))
        if bad >= 0:
            raise PathError("non-positive radicand in indirect-GARCH path", index=bad)
    if not np.all(np.isfinite(q)):
        raise PathError(
            "quantile path diverged", index=int(np.argmin(np.isfinite(q)))
        )
    return q


def es_path_multiplicative(q, gamma0):
    """Shortfall path (1 + exp(gamma0)) * q; same sign as q, further from 0."""
    return (1.0 + np.exp(gamma0)) * np.asarray(q, dtype=float)


def es_path_ar(q, y, gamma, x0):
    """Autoregressive shortfall path.

    Returns ``(es, x)`` with es = q - x. The offset update at time t uses the
    realized violation indicator y_t <= q_t; entry 0 carries the seed ``x0``.
    """
    q = np.ascontiguousarray(q, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if q.shape != y.shape:
        raise ValidationError("quantile path and returns must align")
    gamma = np.asarray(gamma, dtype=float)
    x = _ar_offset_loop(gamma[0], gamma[1], gamma[2], q, y, float(x0))
    return q - x, x


def delta_from_es(es, tau, mean_y=0.0):
    """Positive scale path tau * (mean_y - es); errors if any entry is not."""
    delta = tau * (mean_y - np.asarray(es, dtype=float))
    bad = np.where(~(delta > 0.0))[0] if delta.ndim else None
    if delta.ndim == 0:
        if not delta > 0.0:
            raise PathError("shortfall path implies a non-positive scale")
        return float(delta)
    if bad.size:
        raise PathError(
            "shortfall path implies a non-positive scale", index=int(bad[0])
        )
    return delta


def risk_path(spec, link, y, q0, tau, mean_y=0.0):
    """Quantile, shortfall and scale paths bundled for one series."""
    q = quantile_path(spec, y, q0)
    if link.kind == MULT:
        es = es_path_multiplicative(q, link.gamma0)
        x = None
    else:
        es, x = es_path_ar(q, y, link.gamma, link.x0)
    delta = delta_from_es(es, tau, mean_y)
    return RiskPath(quantile=q, es=es, delta=delta, x=x)


def one_step_forecast(spec, link, q_last, y_last, x_last=0.0):
    """Out-of-sample one-step quantile and shortfall.

    The autoregressive offset carries its last in-sample value: the next
    period's violation is unknown at forecast time.
    """
    q_next = quantile_step(spec, q_last, y_last)
    if link.kind == MULT:
        es_next = (1.0 + np.exp(link.gamma0)) * q_next
    else:
        es_next = q_next - x_last
    return q_next, es_next


def initial_quantile(y, tau, frac=0.1, min_obs=50):
    """Empirical tau-quantile of the leading segment of the sample."""
    y = np.asarray(y, dtype=float)
    n = min(y.size, max(int(np.ceil(frac * y.size)), min_obs))
    return float(np.quantile(y[:n], tau))


def initial_es_offset(y, q0, frac=0.1, min_obs=50):
    """Mean exceedance below ``q0`` over the leading segment, floored at 0."""
    y = np.asarray(y, dtype=float)
    n = min(y.size, max(int(np.ceil(frac * y.size)), min_obs))
    head = y[:n]
    exceed = q0 - head[head < q0]
    if exceed.size == 0:
        return 0.0
    return float(max(np.mean(exceed), 0.0))
