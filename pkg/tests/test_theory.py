import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.stats import norm

from hilora.errors import DimensionMismatch, InfiniteMoment, InvalidIndex, NotPositiveDefinite
from hilora.numerics import RngStream
from hilora.task_model import gaussian
from hilora.theory import (
    GaussianPair,
    OodScenario,
    alpha_moment,
    alpha_moment_terms,
    best_ood_bound,
    bhattacharyya_exponent,
    bhattacharyya_matrix,
    bounds_report,
    chernoff_coefficient,
    closest_source,
    gaussian_kl,
    monte_carlo_exclusion_rate,
    pairwise_bayes_bound,
    prior_weighted_bound,
    random_sources,
    random_spd,
    topk_id_bound,
    topk_ood_bound,
    variance_normalization_ratio,
    verify_id,
    verify_ood,
    wilson_interval,
)

GRID = np.linspace(-40.0, 40.0, 400_001)


def log_normal_pdf(x, mu, var):
    return -0.5 * math.log(2 * math.pi * var) - 0.5 * (x - mu) ** 2 / var


def quad_moment(q, pj, ps, alpha):
    """Trapezoid of q (pj/ps)^alpha over [-40, 40]; each argument is (mu, var)."""
    log_f = log_normal_pdf(GRID, *q) + alpha * (log_normal_pdf(GRID, *pj) - log_normal_pdf(GRID, *ps))
    return trapezoid(np.exp(log_f), GRID)


def quad_chernoff(pa, pb, alpha):
    log_f = (1 - alpha) * log_normal_pdf(GRID, *pa) + alpha * log_normal_pdf(GRID, *pb)
    return trapezoid(np.exp(log_f), GRID)


def g1(mu, var):
    return gaussian([mu], [[var]])


def spd_pair(seed, dim):
    rng = RngStream(seed)
    return (gaussian(rng.standard_normal(dim), random_spd(dim, rng)),
            gaussian(rng.standard_normal(dim), random_spd(dim, rng)))


# -- Bhattacharyya -----------------------------------------------------------


def test_bhattacharyya_examples():
    assert bhattacharyya_exponent(g1(0, 1), g1(0, 1)) == 0.0
    assert bhattacharyya_exponent(GaussianPair.of([0.0], [[1.0]], [2.0], [[1.0]])) == pytest.approx(0.5, abs=1e-14)
    assert pairwise_bayes_bound(g1(0, 1), g1(2, 1)) == pytest.approx(math.exp(-0.5), rel=1e-14)
    assert bhattacharyya_exponent(g1(0, 1), g1(0, 4)) == pytest.approx(0.5 * math.log(2.5 / 2), abs=1e-14)


def test_bayes_bound_dominates_true_error_and_decays():
    assert norm.cdf(-1.0) <= pairwise_bayes_bound(g1(0, 1), g1(2, 1))
    assert pairwise_bayes_bound(g1(0, 1), g1(20, 1)) < 1e-21
    assert prior_weighted_bound(g1(0, 1), g1(2, 1), 0.25, 0.25) == pytest.approx(0.25 * math.exp(-0.5))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), dim=st.integers(1, 4))
def test_bhattacharyya_symmetric_non_negative(seed, dim):
    a, b = spd_pair(seed, dim)
    bab = bhattacharyya_exponent(a, b)
    assert bab >= 0.0
    assert bab == pytest.approx(bhattacharyya_exponent(b, a), abs=1e-10)


def test_bhattacharyya_errors():
    with pytest.raises(DimensionMismatch):
        bhattacharyya_exponent(g1(0, 1), gaussian([0.0, 0.0], np.eye(2)))
    with pytest.raises(NotPositiveDefinite):
        bhattacharyya_exponent((np.zeros(2), [[1.0, 2.0], [2.0, 1.0]]), gaussian(np.zeros(2), np.eye(2)))


# -- Top-k ID bound ----------------------------------------------------------


def test_topk_id_bound_examples():
    same = [g1(0, 1), g1(0, 1)]
    assert topk_id_bound(0, same, 1) == 1.0
    models = [gaussian(5 * np.array(v, float), np.eye(2)) for v in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 2)]]
    expect = 0.5 * sum(math.exp(-bhattacharyya_exponent(models[3], models[j])) for j in range(5) if j != 3)
    assert topk_id_bound(3, models, 2) == pytest.approx(expect, rel=1e-14)
    assert topk_id_bound(3, models, 2) == pytest.approx(0.5 * topk_id_bound(3, models, 1), rel=1e-14)
    with pytest.raises(InvalidIndex):
        topk_id_bound(5, models, 1)


def test_raw_bound_kept_for_reporting():
    close = [g1(0, 1), g1(0.1, 1), g1(0.2, 1)]
    assert topk_id_bound(0, close, 1, clamp=False) > 1.0
    report = bounds_report(close, ks=(1,))
    row = report["topk_id_bounds"][0]["k=1"]
    assert row["bound"] == 1.0 and row["raw"] > 1.0
    np.testing.assert_allclose(report["bhattacharyya"], bhattacharyya_matrix(close))


# -- KL ------------------------------------------------------------------


def test_kl_examples():
    assert gaussian_kl(g1(0, 1), g1(0, 1)) == 0.0
    assert gaussian_kl(g1(0, 1), g1(1, 1)) == pytest.approx(0.5, abs=1e-14)
    assert gaussian_kl(g1(0, 1), g1(0, 4)) == pytest.approx(0.5 * (0.25 - 1 + math.log(4)), abs=1e-14)
    assert gaussian_kl(g1(0, 4), g1(0, 1)) == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-14)
    assert closest_source(g1(1.9, 1), [g1(0, 1), g1(2, 1), g1(5, 1)]) == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), dim=st.integers(1, 4))
def test_kl_non_negative(seed, dim):
    a, b = spd_pair(seed, dim)
    assert gaussian_kl(a, b) >= 0.0
    assert gaussian_kl(a, a) == pytest.approx(0.0, abs=1e-12)


# -- Chernoff coefficient -----------------------------------------------------


def test_chernoff_identity_and_bhattacharyya():
    for alpha in (0.1, 0.5, 0.9):
        assert chernoff_coefficient(g1(1, 2), g1(1, 2), alpha) == pytest.approx(1.0, abs=1e-14)
    for seed in range(10):
        a, b = spd_pair(seed, 3)
        assert chernoff_coefficient(a, b, 0.5) == pytest.approx(math.exp(-bhattacharyya_exponent(a, b)), abs=1e-10)


def test_chernoff_matches_quadrature():
    assert chernoff_coefficient(g1(0, 1), g1(2, 1), 0.3) == pytest.approx(quad_chernoff((0, 1), (2, 1), 0.3), abs=1e-8)
    # unequal variances exercise the determinant weights
    assert chernoff_coefficient(g1(0.5, 0.7), g1(-1, 2.5), 0.2) == pytest.approx(
        quad_chernoff((0.5, 0.7), (-1, 2.5), 0.2), abs=1e-8)


def test_chernoff_alpha_domain():
    with pytest.raises(ValueError):
        chernoff_coefficient(g1(0, 1), g1(0, 1), 1.0)


# -- alpha moment --------------------------------------------------------------


def test_alpha_moment_normalization_and_bhattacharyya():
    ps, pj = g1(0, 1), g1(2, 1.5)
    assert alpha_moment(ps, pj, ps, 1.0) == pytest.approx(1.0, abs=1e-9)
    assert alpha_moment(ps, pj, ps, 0.5) == pytest.approx(math.exp(-bhattacharyya_exponent(ps, pj)), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(0.05, 0.95))
def test_alpha_moment_at_source_is_chernoff(seed, alpha):
    ps, pj = spd_pair(seed, 3)
    try:
        m = alpha_moment(ps, pj, ps, alpha)
    except InfiniteMoment:
        return
    # q = p_istar reduces the moment to rho_alpha(p_istar, p_j)
    assert m == pytest.approx(chernoff_coefficient(ps, pj, alpha), abs=1e-9)


def test_alpha_moment_matches_quadrature_unit_variance():
    q, pj, ps = (0.3, 1.0), (2.0, 1.0), (-0.5, 1.0)
    for alpha in (0.2, 0.5, 1.0):
        got = alpha_moment(g1(*q), g1(*pj), g1(*ps), alpha)
        assert got == pytest.approx(quad_moment(q, pj, ps, alpha), abs=1e-6)


def test_alpha_moment_terms_shape():
    terms = alpha_moment_terms(g1(0, 1), g1(1, 1), g1(0, 1), 0.5)
    np.testing.assert_allclose(terms.weighted_precision, [[1.0]])
    assert math.exp(terms.log_moment) == pytest.approx(alpha_moment(g1(0, 1), g1(1, 1), g1(0, 1), 0.5))


def test_alpha_moment_infinite_when_precision_indefinite():
    # 1/var_q + a/var_j - a/var_s = 1/4 + 1/100 - 1 < 0
    with pytest.raises(InfiniteMoment):
        alpha_moment(g1(0, 4), g1(0, 100), g1(0, 1), 1.0)
    with pytest.raises(ValueError):
        alpha_moment(g1(0, 1), g1(0, 1), g1(0, 1), 0.0)


# -- OOD bound ------------------------------------------------------------------


def test_ood_bound_at_source_matches_id_bound():
    models = [gaussian(6 * np.array(v, float), np.eye(2)) for v in [(0, 0), (1, 0), (0, 1), (1, 1)]]
    b = topk_ood_bound(OodScenario(models[2], tuple(models), 0.5), 1)
    assert b.istar == 2 and b.finite
    assert b.raw == pytest.approx(topk_id_bound(2, models, 1), rel=1e-10)
    assert topk_ood_bound(OodScenario(models[2], tuple(models), 0.5), 2).raw == pytest.approx(0.5 * b.raw, rel=1e-14)


def test_ood_bound_flags_vacuous():
    sources = (g1(0, 1), g1(0, 100))
    q = g1(0.1, 4)  # closest source is the unit one, and M is indefinite at alpha = 1
    b = topk_ood_bound(OodScenario(q, sources, 1.0), 1)
    assert b.vacuous and not b.finite and b.value == 1.0 and b.infinite_terms == (1,)
    assert b.to_dict()["raw"] is None
    best, table = best_ood_bound(q, sources, 1)
    assert len(table) == 10
    assert best is None or best.finite


def test_ood_scenario_validation():
    with pytest.raises(ValueError):
        OodScenario(g1(0, 1), (g1(0, 1),), alpha=1.5)
    with pytest.raises(DimensionMismatch):
        OodScenario(g1(0, 1), (gaussian(np.zeros(2), np.eye(2)),))


# -- Monte Carlo ---------------------------------------------------------------


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    # closed form with z = 1.96: centre 0.5, half-width z*sqrt(.25/100 + z^2/40000)/(1+z^2/100)
    z = 1.959963984540054
    half = z * math.sqrt(0.25 / 100 + z * z / 40000) / (1 + z * z / 100)
    assert lo == pytest.approx(0.5 - half, abs=1e-14) and hi == pytest.approx(0.5 + half, abs=1e-14)
    assert wilson_interval(0, 1000)[0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_mc_identical_models_k2_never_excludes():
    r = monte_carlo_exclusion_rate([g1(0, 1), g1(0, 1)], 0, 2, 2000, RngStream(0))
    assert r.rate == 0.0


def test_mc_one_dim_pair_matches_normal_cdf():
    r = monte_carlo_exclusion_rate([g1(0, 1), g1(2, 1)], 0, 1, 100_000, RngStream(1))
    assert r.low <= norm.cdf(-1.0) <= r.high
    assert r.rate <= math.exp(-0.5)


def test_mc_ood_truth_uses_closest_source():
    r = monte_carlo_exclusion_rate([g1(0, 1), g1(4, 1)], g1(3.5, 1.2), 1, 1000, RngStream(2))
    assert r.target == 1
    with pytest.raises(ValueError):
        monte_carlo_exclusion_rate([g1(0, 1)], 0, 1, 999, RngStream(0))
    with pytest.raises(InvalidIndex):
        monte_carlo_exclusion_rate([g1(0, 1)], 3, 1, 1000, RngStream(0))


def test_verify_small_runs_hold_and_are_monotone():
    rows = verify_id(3, 5000, RngStream(3))
    assert all(r.holds for r in rows)
    for s in range(3):
        bounds = [r.bound for r in rows if r.scenario == s]
        assert bounds == sorted(bounds, reverse=True)
    ood = verify_ood(2, 5000, RngStream(4))
    assert all(r.holds for r in ood)
    assert {r.kind for r in ood} == {"ood"}


def test_random_generators():
    rng = RngStream(5)
    s = random_spd(4, rng, 0.5, 2.0)
    eig = np.linalg.eigvalsh(s)
    assert eig.min() >= 0.5 - 1e-9 and eig.max() <= 2.0 + 1e-9
    assert len(random_sources(3, 4, rng)) == 4


def test_variance_ratio_near_one():
    assert 0.9 <= variance_normalization_ratio(32, 4, 8, 60, RngStream(6)) <= 1.1


def test_alpha_moment_overflow_is_inf():
    # M = 1/1.0 + 1/0.5 - 1/0.34 stays positive while h^2/M overflows a double
    assert alpha_moment(g1(0, 1), g1(60, 0.5), g1(-60, 0.34), 1.0) == math.inf
