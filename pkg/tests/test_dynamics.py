import csv
import pathlib

import numpy as np
import pytest

from quantes.dynamics import (
    AR,
    AS,
    IG,
    MULT,
    SAV,
    CaviarSpec,
    ESLink,
    delta_from_es,
    es_path_ar,
    es_path_multiplicative,
    initial_es_offset,
    initial_quantile,
    one_step_forecast,
    quantile_path,
    quantile_step,
    risk_path,
)
from quantes.exceptions import PathError, ValidationError

DATA = pathlib.Path(__file__).parent / "data"


def _read_column(path, name):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r[name]) for r in rows])


@pytest.fixture(scope="module")
def synthetic():
    return _read_column(DATA / "synthetic_returns.csv", "y")


def test_sav_path_matches_golden(synthetic):
    golden = _read_column(DATA / "golden_sav_path.csv", "q")
    spec = CaviarSpec(SAV, -0.2, 0.85, [-0.1])
    q = quantile_path(spec, synthetic, q0=-1.8)
    np.testing.assert_allclose(q, golden, rtol=1e-10)


def test_ar_es_matches_golden(synthetic):
    spec = CaviarSpec(SAV, -0.2, 0.85, [-0.1])
    q = quantile_path(spec, synthetic, q0=-1.8)
    es_gold = _read_column(DATA / "golden_ar_es.csv", "es")
    x_gold = _read_column(DATA / "golden_ar_es.csv", "x")
    es, x = es_path_ar(q, synthetic, [0.05, 0.12, 0.80], x0=0.3)
    np.testing.assert_allclose(es, es_gold, rtol=1e-10)
    np.testing.assert_allclose(x, x_gold, rtol=1e-10)


def test_sav_constant_series_fixed_point():
    # With y identically c, the path converges to (omega + beta |c|)/(1 - eta).
    spec = CaviarSpec(SAV, -0.1, 0.8, [-0.2])
    y = np.full(4000, 1.5)
    q = quantile_path(spec, y, q0=-3.0)
    expected = (-0.1 + -0.2 * 1.5) / (1.0 - 0.8)
    assert q[-1] == pytest.approx(expected, abs=1e-10)


def test_as_reduces_to_sav_when_betas_equal():
    rng = np.random.default_rng(0)
    y = rng.normal(size=300)
    sav = CaviarSpec(SAV, -0.05, 0.9, [-0.15])
    asym = CaviarSpec(AS, -0.05, 0.9, [-0.15, -0.15])
    np.testing.assert_allclose(
        quantile_path(sav, y, -1.0), quantile_path(asym, y, -1.0), rtol=1e-14
    )


def test_ig_negative_root_and_square_identity():
    spec = CaviarSpec(IG, 0.2, 0.7, [0.1])
    rng = np.random.default_rng(1)
    y = rng.normal(size=200)
    q = quantile_path(spec, y, q0=-1.0)
    assert np.all(q < 0.0)
    # squared path satisfies the linear recursion exactly
    for t in range(1, 200):
        assert q[t] ** 2 == pytest.approx(
            0.2 + 0.7 * q[t - 1] ** 2 + 0.1 * y[t - 1] ** 2, rel=1e-12
        )


def test_ig_nonpositive_radicand_raises_with_index():
    spec = CaviarSpec(IG, -0.5, 0.1, [0.0])
    y = np.zeros(10)
    with pytest.raises(PathError) as err:
        quantile_path(spec, y, q0=-0.1)
    assert err.value.index == 1


def test_quantile_step_matches_path():
    rng = np.random.default_rng(2)
    y = rng.normal(size=50)
    for spec in (
        CaviarSpec(SAV, -0.2, 0.85, [-0.1]),
        CaviarSpec(AS, -0.2, 0.8, [-0.1, 0.05]),
        CaviarSpec(IG, 0.2, 0.7, [0.1]),
    ):
        q = quantile_path(spec, y, q0=-1.5)
        for t in range(1, 50):
            assert quantile_step(spec, q[t - 1], y[t - 1]) == pytest.approx(
                q[t], rel=1e-14
            )


def test_path_determinism(synthetic):
    spec = CaviarSpec(AS, -0.15, 0.88, [-0.05, 0.1])
    a = quantile_path(spec, synthetic, -2.0)
    b = quantile_path(spec, synthetic, -2.0)
    np.testing.assert_array_equal(a, b)


def test_es_multiplicative_steeper_than_quantile():
    q = np.array([-1.0, -2.0, -0.5])
    es = es_path_multiplicative(q, gamma0=-1.1)
    factor = 1.0 + np.exp(-1.1)
    np.testing.assert_allclose(es, factor * q, rtol=1e-14)
    assert np.all(es < q)


def test_es_ar_zero_gammas_zero_x0_collapses_to_quantile():
    rng = np.random.default_rng(3)
    y = rng.normal(size=100)
    q = quantile_path(CaviarSpec(SAV, -0.2, 0.85, [-0.1]), y, -1.5)
    es, x = es_path_ar(q, y, [0.0, 0.0, 0.0], x0=0.0)
    np.testing.assert_array_equal(es, q)
    np.testing.assert_array_equal(x, np.zeros_like(q))


def test_es_ar_no_violations_keeps_offset_constant():
    y = np.zeros(50)
    q = np.full(50, -1.0)  # y never reaches q
    es, x = es_path_ar(q, y, [0.05, 0.1, 0.9], x0=0.4)
    np.testing.assert_array_equal(x, np.full(50, 0.4))
    np.testing.assert_allclose(es, q - 0.4)


def test_es_ar_offset_stays_nonnegative():
    rng = np.random.default_rng(4)
    y = rng.normal(size=500) - 0.5
    q = quantile_path(CaviarSpec(SAV, -0.05, 0.9, [-0.1]), y, -1.0)
    _, x = es_path_ar(q, y, [0.0, 0.0, 0.0], x0=0.2)
    assert np.all(x >= 0.0)


def test_delta_from_es():
    es = np.array([-2.0, -1.0, -4.0])
    np.testing.assert_allclose(delta_from_es(es, 0.1), [0.2, 0.1, 0.4])
    np.testing.assert_allclose(
        delta_from_es(es, 0.25, mean_y=1.0), 0.25 * (1.0 - es)
    )
    with pytest.raises(PathError):
        delta_from_es(np.array([-1.0, 0.5]), 0.1)


def test_risk_path_bundles_consistently(synthetic):
    spec = CaviarSpec(SAV, -0.2, 0.85, [-0.1])
    link = ESLink(AR, gamma=[0.05, 0.12, 0.8], x0=0.3)
    rp = risk_path(spec, link, synthetic, q0=-1.8, tau=0.1)
    np.testing.assert_allclose(rp.delta, 0.1 * (0.0 - rp.es), rtol=1e-14)
    np.testing.assert_allclose(rp.es, rp.quantile - rp.x, rtol=1e-14)
    assert np.all(rp.delta > 0.0)


def test_one_step_forecast_consistent_with_path(synthetic):
    spec = CaviarSpec(SAV, -0.2, 0.85, [-0.1])
    link = ESLink(MULT, gamma0=-1.1)
    rp = risk_path(spec, link, synthetic, q0=-1.8, tau=0.1)
    # Forecast from T-1 state must equal the in-sample value at T.
    q_next, es_next = one_step_forecast(
        spec, link, rp.quantile[-2], synthetic[-2]
    )
    assert q_next == pytest.approx(rp.quantile[-1], rel=1e-14)
    assert es_next == pytest.approx(rp.es[-1], rel=1e-14)


def test_one_step_forecast_ar_carries_offset():
    spec = CaviarSpec(SAV, -0.2, 0.85, [-0.1])
    link = ESLink(AR, gamma=[0.05, 0.12, 0.8], x0=0.0)
    q_next, es_next = one_step_forecast(spec, link, -1.0, 0.5, x_last=0.7)
    assert es_next == pytest.approx(q_next - 0.7, rel=1e-14)


def test_initial_state_helpers():
    rng = np.random.default_rng(5)
    y = rng.normal(size=1000)
    q0 = initial_quantile(y, 0.1)
    assert q0 == pytest.approx(np.quantile(y[:100], 0.1))
    # short series fall back to min_obs capped at the sample size
    q0_short = initial_quantile(y[:30], 0.1)
    assert q0_short == pytest.approx(np.quantile(y[:30], 0.1))
    x0 = initial_es_offset(y, q0)
    head = y[:100]
    assert x0 == pytest.approx(np.mean(q0 - head[head < q0]))
    assert initial_es_offset(y, y.min() - 1.0) == 0.0


def test_spec_validation():
    with pytest.raises(ValidationError):
        CaviarSpec("garch", -0.1, 0.8, [-0.1])
    with pytest.raises(ValidationError):
        CaviarSpec(SAV, -0.1, 0.8, [-0.1, 0.2])
    with pytest.raises(ValidationError):
        CaviarSpec(AS, -0.1, 0.8, [-0.1])
    with pytest.raises(ValidationError):
        CaviarSpec(SAV, np.inf, 0.8, [-0.1])
    with pytest.raises(ValidationError):
        ESLink(AR, gamma=[0.1, -0.2, 0.3], x0=0.0)
    with pytest.raises(ValidationError):
        ESLink(AR, gamma=[0.1, 0.2, 0.3], x0=-0.5)
    with pytest.raises(ValidationError):
        ESLink("scale", gamma0=0.0)
