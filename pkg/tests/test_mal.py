import numpy as np
import pytest

from quantes.exceptions import DegeneratePointError, ValidationError
from quantes.mal import (
    ALParams,
    MALConstraints,
    MALParams,
    al_cdf,
    al_log_density,
    al_mean,
    al_quantile,
    as_levels,
    assemble_sigma,
    fixed_scale,
    fixed_skew,
    implied_covariance,
    linear_combine,
    mal_log_density,
    mal_sample,
)

# Frozen mixing-variable quadrature values for the joint log density.
DENSITY_ORACLE = [
    (
        dict(
            mu=[0.1, -0.3],
            delta=[0.8, 1.4],
            psi=[[1, 0.45], [0.45, 1]],
            tau=[0.1, 0.25],
        ),
        [-1.2, 0.7],
        -5.79416901917271,
    ),
    (
        dict(mu=[0.0, 0.0], delta=[1.0, 1.0], psi=[[1, -0.3], [-0.3, 1]], tau=[0.05, 0.05]),
        [0.5, 0.1],
        -4.43298001979120,
    ),
    (
        dict(
            mu=[0.2, -0.1, 0.0],
            delta=[1.1, 0.6, 2.0],
            psi=[[1, 0.3, 0.7], [0.3, 1, 0.5], [0.7, 0.5, 1]],
            tau=[0.1, 0.1, 0.1],
        ),
        [-2.0, 1.0, 0.3],
        -7.97755109322583,
    ),
    (
        dict(
            mu=[0.0, 0.0, 0.0],
            delta=[0.5, 0.5, 0.5],
            psi=np.eye(3).tolist(),
            tau=[0.5, 0.25, 0.75],
        ),
        [0.05, -0.02, 0.01],
        0.02292311742059,
    ),
]


def test_fixed_parameter_identity():
    tau = np.linspace(0.01, 0.99, 25)
    lhs = 2.0 * fixed_scale(tau) ** 2 + fixed_skew(tau) ** 2
    np.testing.assert_allclose(lhs, 1.0 / (tau * (1.0 - tau)) ** 2, rtol=1e-12)


def test_fixed_skew_signs():
    assert fixed_skew(0.5) == 0.0
    assert fixed_skew(0.1) > 0.0
    assert fixed_skew(0.9) < 0.0


def test_constraints_from_levels():
    cons = MALConstraints.from_levels([0.1, 0.5, 0.9])
    assert cons.p == 3
    assert cons.nu == pytest.approx((2.0 - 3.0) / 2.0)
    np.testing.assert_allclose(cons.xi_tilde, fixed_skew(np.array([0.1, 0.5, 0.9])))


def test_levels_validation():
    for bad in ([0.0, 0.5], [0.5, 1.0], [np.nan], []):
        with pytest.raises(ValidationError):
            as_levels(bad)


def test_assemble_sigma_matches_elementwise_oracle():
    tau = np.array([0.1, 0.25, 0.6])
    psi = np.array([[1, 0.3, -0.2], [0.3, 1, 0.5], [-0.2, 0.5, 1]])
    cons = MALConstraints.from_levels(tau)
    sigma = assemble_sigma(psi, cons)
    s = np.sqrt(2.0 / (tau * (1.0 - tau)))
    for i in range(3):
        for j in range(3):
            assert sigma[i, j] == pytest.approx(s[i] * psi[i, j] * s[j], rel=1e-14)
    assert np.allclose(sigma, sigma.T)
    assert np.linalg.eigvalsh(sigma).min() > 0.0


def test_params_validation():
    with pytest.raises(ValidationError):
        MALParams(mu=[0.0], delta=[-1.0], psi=[[1.0]], tau=[0.1])
    with pytest.raises(ValidationError):
        MALParams(mu=[0.0, 0.0], delta=[1.0, 1.0], psi=[[1, 0.2], [0.3, 1]], tau=[0.1, 0.1])
    with pytest.raises(ValidationError):
        MALParams(mu=[0.0, 0.0], delta=[1.0, 1.0], psi=[[1, 1.2], [1.2, 1]], tau=[0.1, 0.1])
    with pytest.raises(ValidationError):
        MALParams(mu=[0.0], delta=[1.0, 1.0], psi=[[1.0]], tau=[0.1])


@pytest.mark.parametrize("kw,y,expected", DENSITY_ORACLE)
def test_log_density_matches_quadrature_oracle(kw, y, expected):
    params = MALParams(**kw)
    assert mal_log_density(np.array(y), params) == pytest.approx(expected, abs=1e-8)


def test_log_density_reduces_to_univariate(seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        tau = float(rng.uniform(0.02, 0.98))
        mu = float(rng.normal())
        delta = float(rng.uniform(0.2, 3.0))
        y = mu + float(rng.normal()) * delta + 1e-6
        par = MALParams(mu=[mu], delta=[delta], psi=[[1.0]], tau=[tau])
        a = mal_log_density(np.array([y]), par)
        b = float(al_log_density(y, mu, tau, delta))
        assert a == pytest.approx(b, abs=1e-10)


def _midpoint_mass(params, lo, hi, cells):
    edges = np.linspace(lo, hi, cells + 1)
    h = edges[1] - edges[0]
    centers = edges[:-1] + 0.5 * h
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    vals = np.exp(mal_log_density(pts, params))
    return vals.reshape(cells, cells), h


def test_log_density_normalizes_p2():
    # Exponential tails make a finite box fine; the integrable log
    # singularity at mu needs a finer midpoint grid near the center, so the
    # central box contribution is recomputed at higher resolution.
    params = MALParams(
        mu=[0.0, 0.0], delta=[1.0, 1.5], psi=[[1, 0.4], [0.4, 1]], tau=[0.2, 0.4]
    )
    coarse, h = _midpoint_mass(params, -60.0, 60.0, 600)  # h = 0.2
    total = coarse.sum() * h * h
    # cells covering [-2, 2]^2 exactly (box edges align with cell edges)
    inner = slice(290, 310)
    total -= coarse[inner, inner].sum() * h * h
    fine, hf = _midpoint_mass(params, -2.0, 2.0, 800)  # h = 0.005
    total += fine.sum() * hf * hf
    assert total == pytest.approx(1.0, abs=1e-3)


def test_log_density_degenerate_point():
    params = MALParams(
        mu=[0.1, 0.2], delta=[1.0, 1.0], psi=[[1, 0.0], [0.0, 1]], tau=[0.1, 0.1]
    )
    with pytest.raises(DegeneratePointError):
        mal_log_density(np.array([0.1, 0.2]), params)


def test_log_density_row_batch_matches_single():
    params = MALParams(
        mu=[0.0, 0.0], delta=[1.0, 2.0], psi=[[1, 0.25], [0.25, 1]], tau=[0.1, 0.3]
    )
    pts = np.array([[0.5, -0.3], [-1.0, 2.0], [0.1, 0.1]])
    batch = mal_log_density(pts, params)
    singles = [mal_log_density(row, params) for row in pts]
    np.testing.assert_allclose(batch, singles, rtol=1e-14)


def test_sample_marginal_quantiles():
    params = MALParams(
        mu=[0.3, -0.5, 0.0],
        delta=[1.0, 0.5, 2.0],
        psi=[[1, 0.3, 0.7], [0.3, 1, 0.5], [0.7, 0.5, 1]],
        tau=[0.05, 0.25, 0.5],
    )
    draws = mal_sample(params, 400_000, seed=1234)
    hit = (draws < params.mu).mean(axis=0)
    np.testing.assert_allclose(hit, params.tau, atol=0.004)


def test_sample_reproducible():
    params = MALParams(mu=[0.0], delta=[1.0], psi=[[1.0]], tau=[0.3])
    a = mal_sample(params, 100, seed=9)
    b = mal_sample(params, 100, seed=9)
    np.testing.assert_array_equal(a, b)


def test_sample_mean_matches_theory():
    params = MALParams(
        mu=[0.1, -0.2], delta=[0.7, 1.2], psi=[[1, -0.4], [-0.4, 1]], tau=[0.2, 0.7]
    )
    draws = mal_sample(params, 600_000, seed=5)
    theory = params.mu + params.delta * params.constraints.xi_tilde
    np.testing.assert_allclose(draws.mean(axis=0), theory, atol=0.02)


def test_implied_covariance_against_samples():
    params = MALParams(
        mu=[0.0, 0.0], delta=[1.0, 0.6], psi=[[1, 0.5], [0.5, 1]], tau=[0.15, 0.4]
    )
    draws = mal_sample(params, 800_000, seed=77)
    emp = np.cov(draws.T)
    np.testing.assert_allclose(emp, implied_covariance(params), rtol=0.03)


def test_linear_combine_unit_vector_recovers_marginal():
    params = MALParams(
        mu=[0.4, -1.0, 0.2],
        delta=[0.9, 1.7, 0.3],
        psi=[[1, 0.2, 0.1], [0.2, 1, -0.3], [0.1, -0.3, 1]],
        tau=[0.1, 0.3, 0.8],
    )
    for j in range(3):
        b = np.zeros(3)
        b[j] = 1.0
        al = linear_combine(b, params)
        assert al.mu_star == pytest.approx(params.mu[j], abs=1e-12)
        assert al.tau_star == pytest.approx(params.tau[j], abs=1e-12)
        assert al.delta_star == pytest.approx(params.delta[j], abs=1e-12)


def test_linear_combine_median_levels():
    params = MALParams(
        mu=[0.0, 0.0], delta=[1.0, 2.0], psi=[[1, 0.3], [0.3, 1]], tau=[0.5, 0.5]
    )
    b = np.array([0.6, 0.4])
    al = linear_combine(b, params)
    assert al.tau_star == pytest.approx(0.5, abs=1e-12)
    a = params.sigma() * np.outer(params.delta, params.delta)
    expected = np.sqrt(b @ a @ b) / (2.0 * np.sqrt(2.0))
    assert al.delta_star == pytest.approx(expected, rel=1e-12)


def test_linear_combine_sampling_ks():
    rng = np.random.default_rng(42)
    n = 200_000
    for _ in range(5):
        p = 3
        tau = rng.uniform(0.05, 0.95, size=p)
        corr = np.array([[1, 0.3, 0.5], [0.3, 1, 0.2], [0.5, 0.2, 1]])
        params = MALParams(
            mu=rng.normal(size=p),
            delta=rng.uniform(0.3, 2.0, size=p),
            psi=corr,
            tau=tau,
        )
        b = rng.normal(size=p)
        al = linear_combine(b, params)
        draws = mal_sample(params, n, seed=rng) @ b
        sorted_draws = np.sort(draws)
        theo = al_cdf(sorted_draws, al.mu_star, al.tau_star, al.delta_star)
        emp_hi = np.arange(1, n + 1) / n
        emp_lo = np.arange(0, n) / n
        ks = max(np.abs(theo - emp_hi).max(), np.abs(theo - emp_lo).max())
        assert ks < 0.01


def test_linear_combine_validation():
    params = MALParams(mu=[0.0, 0.0], delta=[1.0, 1.0], psi=np.eye(2), tau=[0.1, 0.1])
    with pytest.raises(ValidationError):
        linear_combine(np.zeros(2), params)
    with pytest.raises(ValidationError):
        linear_combine(np.ones(3), params)


# -- univariate helpers ------------------------------------------------------


def test_al_density_normalizes_and_matches_cdf():
    from scipy import integrate

    mu, tau, delta = 0.3, 0.2, 1.4
    total, _ = integrate.quad(
        lambda y: np.exp(al_log_density(y, mu, tau, delta)),
        -300,
        300,
        points=[mu],
        limit=500,
    )
    assert total == pytest.approx(1.0, abs=1e-9)
    for y in (-3.0, 0.3, 2.5):
        num, _ = integrate.quad(
            lambda s: np.exp(al_log_density(s, mu, tau, delta)),
            -300,
            y,
            points=[mu] if y > mu else None,
            limit=500,
        )
        assert al_cdf(y, mu, tau, delta) == pytest.approx(num, abs=1e-9)


def test_al_cdf_at_location_equals_tau():
    for tau in (0.01, 0.25, 0.5, 0.95):
        assert al_cdf(0.0, 0.0, tau, 2.0) == pytest.approx(tau, abs=1e-14)


def test_al_quantile_inverts_cdf():
    rng = np.random.default_rng(3)
    u = rng.uniform(0.001, 0.999, size=500)
    y = al_quantile(u, -0.4, 0.15, 0.8)
    np.testing.assert_allclose(al_cdf(y, -0.4, 0.15, 0.8), u, atol=1e-12)


def test_al_mean_matches_samples():
    rng = np.random.default_rng(11)
    u = rng.uniform(1e-9, 1 - 1e-9, size=2_000_000)
    y = al_quantile(u, 0.5, 0.2, 1.3)
    assert y.mean() == pytest.approx(al_mean(0.5, 0.2, 1.3), abs=0.01)


def test_alparams_container():
    al = ALParams(mu_star=1.0, tau_star=0.2, delta_star=0.5)
    assert al.mu_star == 1.0 and al.tau_star == 0.2 and al.delta_star == 0.5
