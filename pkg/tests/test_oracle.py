import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gembml.gaussian import DiagGaussian, expected_prior_score
from gembml.nn import Dataset, finite_diff_grad
from gembml.oracle import (
    ConjugateModel,
    FullGaussian,
    analytic_elbo,
    analytic_elbo_grad,
    elbo_gradient_estimate,
    exact_inference,
    exact_log_marginal,
    exact_marginal_grad,
    exact_posterior,
    expected_prior_score_full,
    gem_gradient_estimate,
    grad_error_curve,
    grad_error_problem,
    inflated_variance_rule,
    kl_diag_full,
    l2_decomposition_check,
    local_perturbations,
    mean_field_approx,
    pinsker_bound_study,
    pinsker_report,
    posterior_predictive_optimality_check,
    predicted_variance_ratio,
    random_conjugate_problem,
    shifted_mean_rule,
    exact_rule,
    unrolled_vi,
    variance_ratio_study,
)
from gembml.tasks import ConjugateTaskFamily

STD1 = DiagGaussian.standard(1)


def unit_model(m=1):
    return ConjugateModel(np.ones((m, 1)), 1.0, STD1)


def marginal_ref(model, y):
    cov = model.X @ np.diag(model.prior.var) @ model.X.T + model.noise_var * np.eye(model.m)
    return stats.multivariate_normal.logpdf(y, model.X @ model.prior.mean, cov)


def test_posterior_examples():
    post = exact_posterior(unit_model(), [2.0])
    np.testing.assert_allclose(post.mean, [1.0], atol=1e-15)
    np.testing.assert_allclose(post.cov, [[0.5]], atol=1e-15)
    post2 = exact_posterior(unit_model(2), [2.0, 2.0])
    np.testing.assert_allclose(post2.mean, [4 / 3], atol=1e-14)
    np.testing.assert_allclose(post2.cov, [[1 / 3]], atol=1e-15)
    empty = exact_posterior(ConjugateModel(np.zeros((0, 2)), 1.0, DiagGaussian([0.5, 1.0], [0.2, -0.3])), [])
    np.testing.assert_allclose(empty.mean, [0.5, 1.0])
    np.testing.assert_allclose(empty.cov, np.diag(np.exp([0.2, -0.3])))


def test_log_marginal_examples():
    assert exact_log_marginal(unit_model(), [2.0]) == pytest.approx(-0.5 * math.log(4 * math.pi) - 1.0, abs=1e-14)
    assert exact_log_marginal(unit_model(), [2.0]) == pytest.approx(-2.2655, abs=1e-4)
    # chain rule: log p(y1, y2) - log p(y1) = log N(y2; 1, 1.5)
    diff = exact_log_marginal(unit_model(2), [2.0, 0.0]) - exact_log_marginal(unit_model(), [2.0])
    assert diff == pytest.approx(stats.norm.logpdf(0.0, 1.0, math.sqrt(1.5)), abs=1e-13)
    assert diff == pytest.approx(-1.455, abs=1e-3)


def test_log_marginal_mode_at_predictive_mean():
    model = ConjugateModel(np.ones((1, 1)), 0.5, DiagGaussian([0.7], [0.3]))
    top = exact_log_marginal(model, [0.7])
    assert all(exact_log_marginal(model, [0.7 + d]) < top for d in (-1.0, -1e-3, 1e-3, 2.0))
    assert exact_marginal_grad(model, [0.7]).d_mean[0] == pytest.approx(0.0, abs=1e-15)


def test_marginal_grad_example():
    g = exact_marginal_grad(unit_model(), [2.0])
    assert g.d_mean[0] == pytest.approx(1.0, abs=1e-14)
    assert g.d_log_var[0] == pytest.approx(0.25, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([1, 2, 5]), m=st.integers(1, 8))
def test_log_marginal_matches_scipy(seed, p, m):
    model, y = random_conjugate_problem(np.random.default_rng(seed), p, m)
    assert exact_log_marginal(model, y) == pytest.approx(marginal_ref(model, y), rel=1e-10, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([1, 2, 5]), m=st.integers(1, 8))
def test_gradient_em_identity(seed, p, m):
    model, y = random_conjugate_problem(np.random.default_rng(seed), p, m)
    exact = exact_marginal_grad(model, y).as_vector()
    gem = expected_prior_score_full(exact_posterior(model, y), model.prior).as_vector()
    assert np.max(np.abs(gem - exact)) <= 1e-10

    def f(v):
        return marginal_ref(model.with_prior(DiagGaussian(v[:p], v[p:])), y)

    fd = finite_diff_grad(f, np.concatenate([model.prior.mean, model.prior.log_var]), eps=1e-5)
    np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-6)


def test_elbo_at_exact_posterior_equals_marginal():
    model, y = random_conjugate_problem(np.random.default_rng(0), 3, 6, orthogonal=True)
    post = exact_posterior(model, y)
    # orthogonal design -> diagonal posterior -> zero KL gap
    assert np.max(np.abs(post.cov - np.diag(np.diag(post.cov)))) < 1e-12
    assert analytic_elbo(model, y, post.to_diag()) == pytest.approx(exact_log_marginal(model, y), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_analytic_elbo_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model, y = random_conjugate_problem(rng, 2, 4)
    lam = DiagGaussian(rng.normal(size=2), rng.uniform(-1, 1, 2))
    fd = finite_diff_grad(lambda v: analytic_elbo(model, y, DiagGaussian(v[:2], v[2:])), np.concatenate([lam.mean, lam.log_var]), eps=1e-6)
    np.testing.assert_allclose(analytic_elbo_grad(model, y, lam).as_vector(), fd, rtol=1e-6, atol=1e-6)


def test_unrolled_jacobian_matches_finite_differences():
    model, y = grad_error_problem(np.random.default_rng(3))
    p = model.p
    T, lr = 7, 0.1

    def last(v):
        lam = unrolled_vi(model.with_prior(DiagGaussian(v[:p], v[p:])), y, T, lr).lambdas[-1]
        return np.concatenate([lam.mean, lam.log_var])

    v0 = np.concatenate([model.prior.mean, model.prior.log_var])
    J = np.column_stack([
        (last(v0 + 1e-6 * e) - last(v0 - 1e-6 * e)) / 2e-6 for e in np.eye(2 * p)
    ])
    np.testing.assert_allclose(unrolled_vi(model, y, T, lr).jacobian, J, atol=1e-7)


def test_unrolled_estimates_limits():
    model, y = grad_error_problem(np.random.default_rng(1))
    # T = 0: lambda is the prior, so the score term vanishes and only dELBO/dlambda remains
    g0 = elbo_gradient_estimate(model, y, 0, 0.1).as_vector()
    np.testing.assert_allclose(g0, analytic_elbo_grad(model, y, model.prior).as_vector(), atol=1e-14)
    np.testing.assert_array_equal(gem_gradient_estimate(model, y, 0, 0.1).as_vector(), 0.0)
    exact = exact_marginal_grad(model, y).as_vector()
    np.testing.assert_allclose(elbo_gradient_estimate(model, y, 1000, 0.1).as_vector(), exact, atol=1e-6)
    np.testing.assert_allclose(gem_gradient_estimate(model, y, 1000, 0.1).as_vector(), exact, atol=1e-6)
    curve = grad_error_curve(model, y, [0, 1, 10, 1000], 0.1)
    assert curve.shape == (4, 2)
    assert curve[0, 1] == curve[:, 1].max()
    with pytest.raises(ValueError):
        unrolled_vi(model, y, -1, 0.1)


def test_unrolled_divergence_raises():
    from gembml._validation import NumericError

    model, y = grad_error_problem(np.random.default_rng(1))
    with pytest.raises(NumericError):
        unrolled_vi(model, y, 5000, 50.0)


def test_kl_diag_full_matches_diag_kl():
    from gembml.gaussian import kl

    q = DiagGaussian([0.3, -1.0], [0.2, -0.4])
    p = DiagGaussian([1.0, 0.0], [0.0, 0.5])
    assert kl_diag_full(q, FullGaussian.from_diag(p)) == pytest.approx(kl(q, p), abs=1e-13)


def test_mean_field_is_kl_optimal():
    rng = np.random.default_rng(0)
    model, y = random_conjugate_problem(rng, 3, 5)
    post = exact_posterior(model, y)
    best = mean_field_approx(post)
    k0 = kl_diag_full(best, post)
    for _ in range(50):
        q = DiagGaussian(best.mean + 0.05 * rng.normal(size=3), best.log_var + 0.05 * rng.normal(size=3))
        assert kl_diag_full(q, post) >= k0 - 1e-12


def test_pinsker_examples():
    post = exact_posterior(unit_model(), [2.0])
    r = pinsker_bound_study(unit_model(), [2.0], [post.to_diag()])[0]
    assert r.error == pytest.approx(0.0, abs=1e-15) and r.bound == pytest.approx(0.0, abs=1e-6)
    # mean shift of 0.1 under a standard normal target, mean component only
    rep = pinsker_report(FullGaussian.from_diag(STD1), STD1, DiagGaussian([0.1], [0.0]), components="mean")
    assert rep.error == pytest.approx(0.1, abs=1e-12)
    assert rep.kl == pytest.approx(0.005, abs=1e-15)
    assert rep.bound == pytest.approx(0.1, abs=1e-12)


def test_pinsker_fails_for_distant_variance():
    # the bound relies on a bounded integrand; the score is unbounded, so a
    # variance far from the target breaks it
    rep = pinsker_report(FullGaussian.from_diag(STD1), STD1, DiagGaussian.from_var([0.0], [5.0]))
    assert not rep.holds
    assert rep.error == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([1, 2, 5]))
def test_pinsker_holds_for_local_perturbations(seed, p):
    rng = np.random.default_rng(seed)
    model, y = random_conjugate_problem(rng, p, 6)
    post = exact_posterior(model, y)
    for r in pinsker_bound_study(model, y, local_perturbations(post, rng, 20)):
        assert r.error >= 0 and r.bound >= 0
        assert r.holds


def test_l2_decomposition_examples():
    model = unit_model(2)
    assert abs(l2_decomposition_check(model, [2.0], [0.0])) <= 1e-12
    assert abs(l2_decomposition_check(unit_model(1), [2.0], [])) == 0.0
    assert abs(l2_decomposition_check(unit_model(1), [], [2.0])) <= 1e-12
    with pytest.raises(ValueError):
        l2_decomposition_check(model, [2.0], [])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 4), m=st.integers(1, 8), data=st.data())
def test_l2_decomposition_property(seed, p, m, data):
    model, y = random_conjugate_problem(np.random.default_rng(seed), p, m)
    k = data.draw(st.integers(0, m))
    assert abs(l2_decomposition_check(model, y[:k], y[k:])) <= 1e-9


def test_predictive_optimality():
    fam = ConjugateTaskFamily(p=1)
    rules = {"exact": exact_rule, "same": exact_rule, "shift": shifted_mean_rule(0.5), "inflate": inflated_variance_rule(4.0)}
    table = {r.name: r for r in posterior_predictive_optimality_check(fam, 10_000, rules, 0)}
    assert table["same"].mean_gap == 0.0 and table["same"].p_value == 1.0
    for name in ("shift", "inflate"):
        assert table[name].mean_score < table["exact"].mean_score
        assert table[name].p_value < 0.01
    with pytest.raises(ValueError):
        posterior_predictive_optimality_check(fam, 10, {"shift": shifted_mean_rule(0.5)}, 0)


def test_variance_ratio_prediction():
    assert predicted_variance_ratio(5, 10) == 2.0
    assert predicted_variance_ratio(0, 10) == 1.0
    assert predicted_variance_ratio(5, 10, prior_var=1e-3) == pytest.approx(2.01)


def test_variance_ratio_study():
    res = variance_ratio_study(5, 10, 500, 500, 0)
    assert res.predicted == 2.0
    assert abs(res.ratio - 2.0) <= 0.3
    assert res.ci_low < res.ratio < res.ci_high
    zero = variance_ratio_study(0, 10, 100, 100, 1)
    assert zero.ci_low <= 1.0 <= zero.ci_high
    with pytest.raises(ValueError):
        variance_ratio_study(10, 10, 100, 100, 0)
    with pytest.raises(ValueError):
        variance_ratio_study(5, 10, 50, 100, 0)


def test_exact_inference_engine():
    infer = exact_inference(1.0)
    res = infer(STD1, None, Dataset([[1.0]], [[2.0]]))
    np.testing.assert_allclose(res.lam.mean, [1.0])
    np.testing.assert_allclose(res.lam.var, [0.5])
    assert infer(STD1, None, Dataset(np.zeros((0, 1)), np.zeros((0, 1)))).lam == STD1
    # sequential updating equals pooled updating
    seq = infer(res.lam, None, Dataset([[1.0]], [[0.0]])).lam
    pooled = infer(STD1, None, Dataset([[1.0], [1.0]], [[2.0], [0.0]])).lam
    assert seq.allclose(pooled, atol=1e-14)
    assert expected_prior_score(pooled, STD1).as_vector() == pytest.approx(
        exact_marginal_grad(unit_model(2), [2.0, 0.0]).as_vector(), abs=1e-12
    )
