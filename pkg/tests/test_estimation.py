import numpy as np
import pytest

from quantes import dynamics as dyn
from quantes.estimation import (
    EMConfig,
    ParameterSet,
    dynamic_m_step,
    e_step,
    fit,
    observed_loglik,
    q_function,
    sigma_m_step,
)
from quantes.exceptions import ValidationError
from quantes.mal import MALConstraints, mal_log_density, MALParams
from quantes.simulate import SimScenario, generate, reference_params

PSI3 = np.array([[1, 0.3, 0.7], [0.3, 1, 0.5], [0.7, 0.5, 1.0]])

# Conditional mixing-moment oracle, frozen from adaptive quadrature of the
# exponential-mixture posterior at tau = (0.1, 0.1, 0.1), psi = PSI3.
ESTEP_ORACLE = [
    # (y - q, delta, E[W|y], E[1/W|y])
    ([0.4, -0.3, 0.8], [0.5, 0.4, 0.6], 0.16511275837508, 10.93392896184690),
    ([-1.2, 0.2, -0.5], [0.5, 0.4, 0.6], 0.21738674854918, 7.41386907950574),
]


def _sim_panel(kind=dyn.SAV, link=dyn.MULT, T=400, p=3, seed=5, rep=0):
    params = reference_params(kind, link, p)
    sc = SimScenario(params=params, tau=[0.1] * p, T=T, seed=seed)
    return params, generate(sc, rep), np.full(p, 0.1)


# -- conditional moments ------------------------------------------------------


def test_e_step_matches_quadrature():
    cons = MALConstraints.from_levels([0.1] * 3)
    resid = np.array([row[0] for row in ESTEP_ORACLE])
    delta = np.array([row[1] for row in ESTEP_ORACLE])
    u, z = e_step(resid, np.zeros_like(resid), delta, PSI3, cons)
    for i, (_, _, u_want, z_want) in enumerate(ESTEP_ORACLE):
        assert u[i] == pytest.approx(u_want, abs=1e-12)
        assert z[i] == pytest.approx(z_want, abs=1e-11)


def test_e_step_product_bound():
    # E[W]E[1/W] >= 1 for any posterior, by Jensen
    rng = np.random.default_rng(90)
    cons = MALConstraints.from_levels([0.1, 0.05, 0.25])
    y = rng.normal(size=(200, 3))
    q = y - rng.uniform(0.05, 3.0, size=(200, 3))
    delta = rng.uniform(0.1, 2.0, size=(200, 3))
    u, z = e_step(y, q, delta, PSI3, cons)
    assert np.all(u * z >= 1.0)
    assert np.all(u > 0) and np.all(z > 0)


def test_e_step_p1_closed_forms():
    """At p = 1 the half-integer Bessel ratios collapse: E[W|y] has the
    elementary form sqrt(b/a)(1 + 1/sqrt(ab)) and E[1/W|y] = sqrt(a/b)."""
    tau = 0.1
    cons = MALConstraints.from_levels([tau])
    xi = cons.xi_tilde[0]
    s2 = cons.sigma_tilde[0] ** 2
    rng = np.random.default_rng(91)
    resid = rng.normal(size=(50, 1)) * 2.0
    delta = rng.uniform(0.2, 1.5, size=(50, 1))
    u, z = e_step(resid, np.zeros_like(resid), delta, np.array([[1.0]]), cons)
    r = resid[:, 0] / delta[:, 0]
    a = 2.0 + xi**2 / s2
    b = r**2 / s2
    s = np.sqrt(a * b)
    np.testing.assert_allclose(u, np.sqrt(b / a) * (1.0 + 1.0 / s), rtol=1e-10)
    np.testing.assert_allclose(z, np.sqrt(a / b), rtol=1e-10)


# -- complete-data objective --------------------------------------------------


def test_q_function_p1_reduction():
    """The joint objective at p = 1 equals the scalar formula assembled by
    hand from the same paths."""
    params, y, tau = _sim_panel(p=1, T=300)
    cons = MALConstraints.from_levels(tau)
    xi = cons.xi_tilde[0]
    s2 = cons.sigma_tilde[0] ** 2
    q0 = np.array([dyn.initial_quantile(y[:, 0], tau[0])])
    rng = np.random.default_rng(92)
    u = rng.uniform(0.5, 2.0, y.shape[0])
    z = rng.uniform(0.5, 3.0, y.shape[0])
    got = q_function(params, y, tau, q0, u, z)
    path = dyn.risk_path(params.specs[0], params.links[0], y[:, 0], q0[0], tau[0])
    r = (y[:, 0] - path.quantile) / path.delta
    by_hand = (
        -0.5 * y.shape[0] * np.log(s2)
        - np.log(path.delta).sum()
        + (xi / s2) * r.sum()
        - 0.5 * float(z @ (r**2 / s2))
        - 0.5 * (xi**2 / s2) * u.sum()
    )
    assert got == pytest.approx(by_hand, rel=1e-12)


def test_observed_loglik_is_density_sum():
    params, y, tau = _sim_panel(T=250)
    q0 = np.array([dyn.initial_quantile(y[:, j], tau[j]) for j in range(3)])
    got = observed_loglik(params, y, tau, q0)
    total = 0.0
    for t in range(y.shape[0]):
        mu_t = np.empty(3)
        dl_t = np.empty(3)
        for j in range(3):
            path = dyn.risk_path(params.specs[j], params.links[j], y[:, j], q0[j], tau[j])
            mu_t[j] = path.quantile[t]
            dl_t[j] = path.delta[t]
        point = MALParams(mu=mu_t, delta=dl_t, psi=params.psi, tau=tau)
        total += mal_log_density(y[t], point)
    assert got == pytest.approx(total, rel=1e-10)


# -- M-steps ------------------------------------------------------------------


def test_sigma_m_step_recovers_truth_scale():
    """With true paths and true correlation, the closed-form update lands on
    the generator's correlation up to sampling error."""
    params, y, tau = _sim_panel(T=4000, seed=17)
    cons = MALConstraints.from_levels(tau)
    q0 = np.array([dyn.initial_quantile(y[:, j], tau[j]) for j in range(3)])
    resid = np.empty_like(y)
    delta = np.empty_like(y)
    for j in range(3):
        path = dyn.risk_path(params.specs[j], params.links[j], y[:, j], q0[j], tau[j])
        resid[:, j] = y[:, j] - path.quantile
        delta[:, j] = path.delta
    u, z = e_step(y, y - resid, delta, params.psi, cons)
    candidate = sigma_m_step(resid / delta, u, z, cons)
    assert np.allclose(np.diag(candidate), 1.0)
    np.testing.assert_allclose(candidate, PSI3, atol=0.06)


def test_sigma_m_step_p1_identity():
    cons = MALConstraints.from_levels([0.1])
    out = sigma_m_step(np.random.default_rng(0).normal(size=(50, 1)),
                       np.ones(50), np.ones(50), cons)
    assert out.shape == (1, 1) and out[0, 0] == 1.0


def test_dynamic_m_step_never_lowers_objective():
    params, y, tau = _sim_panel(T=300, seed=23)
    q0 = np.array([dyn.initial_quantile(y[:, j], tau[j]) for j in range(3)])
    cons = MALConstraints.from_levels(tau)
    rng = np.random.default_rng(93)
    perturbed = ParameterSet(
        specs=tuple(
            dyn.CaviarSpec(s.kind, s.omega * 1.3, min(s.eta * 1.05, 0.97),
                           (np.asarray(s.beta) * 0.7).tolist())
            for s in params.specs
        ),
        links=params.links,
        psi=params.psi,
    )
    resid = np.empty_like(y)
    delta = np.empty_like(y)
    for j in range(3):
        path = dyn.risk_path(perturbed.specs[j], perturbed.links[j], y[:, j], q0[j], tau[j])
        resid[:, j] = y[:, j] - path.quantile
        delta[:, j] = path.delta
    u, z = e_step(y, y - resid, delta, perturbed.psi, cons)
    before = q_function(perturbed, y, tau, q0, u, z)
    updated = dynamic_m_step(perturbed, y, tau, q0, u, z,
                             config=EMConfig(n_starts=1, seed=0))
    after = q_function(updated, y, tau, q0, u, z)
    assert after >= before - 1e-6


# -- full fits ----------------------------------------------------------------


@pytest.mark.parametrize("kind,link", [(dyn.SAV, dyn.MULT), (dyn.AS, dyn.AR)])
def test_fit_trace_monotone(kind, link):
    _, y, tau = _sim_panel(kind=kind, link=link, T=350, seed=29)
    result = fit(y, tau, kind=kind, link_kind=link,
                 config=EMConfig(n_starts=2, seed=1))
    diffs = np.diff(result.loglik_trace)
    assert np.all(diffs >= -1e-6)
    assert result.loglik == pytest.approx(result.loglik_trace[-1])


def test_fit_bit_reproducible():
    _, y, tau = _sim_panel(T=300, seed=31)
    cfg = EMConfig(n_starts=2, seed=7)
    a = fit(y, tau, config=cfg)
    b = fit(y, tau, config=cfg)
    assert a.loglik == b.loglik
    assert a.start_index == b.start_index
    for sa, sb in zip(a.params.specs, b.params.specs):
        assert sa.omega == sb.omega and sa.eta == sb.eta
        assert np.array_equal(sa.beta, sb.beta)
    assert np.array_equal(a.params.psi, b.params.psi)


def test_fit_warm_start_stays_near_truth():
    params, y, tau = _sim_panel(T=900, seed=37)
    result = fit(y, tau, config=EMConfig(n_starts=1, seed=0), init=params)
    assert result.converged
    q0 = result.q0
    assert result.loglik >= observed_loglik(params, y, tau, q0) - 1e-6
    for got, true in zip(result.params.specs, params.specs):
        assert abs(got.omega - true.omega) < 0.25
        assert abs(got.eta - true.eta) < 0.15


def test_fit_in_sample_hit_rates():
    # the fitted quantile paths should cover close to tau in sample
    _, y, tau = _sim_panel(T=1000, seed=41)
    result = fit(y, tau, config=EMConfig(n_starts=1, seed=0))
    for j in range(3):
        rate = float(np.mean(y[:, j] <= result.paths[j].quantile))
        assert abs(rate - 0.1) < 0.03


def test_fit_callback_sees_every_iteration():
    _, y, tau = _sim_panel(T=300, seed=43)
    seen = []
    fit(y, tau, config=EMConfig(n_starts=1, seed=0),
        callback=lambda start, it, ll: seen.append((start, it, ll)))
    assert seen
    lls = [ll for _, _, ll in seen]
    assert np.all(np.diff(lls) >= -1e-6)


def test_fit_validation():
    with pytest.raises(ValidationError):
        fit(np.zeros((30, 3)), [0.1, 0.1, 0.1])  # too short for p = 3
    _, y, tau = _sim_panel(T=300)
    with pytest.raises(ValidationError):
        fit(y, [0.1, 0.1])  # tau length mismatch
    with pytest.raises(ValidationError):
        fit(y, tau, kind="garch")
