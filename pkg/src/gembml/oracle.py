"""Exact conjugate Gaussian-linear machinery.

``y = X theta + noise`` with a diagonal Gaussian prior on ``theta`` has a
closed-form posterior, marginal likelihood and marginal-likelihood
gradient. Those closed forms are the ground truth that every meta-gradient
estimator in the package is checked against, and they power the studies
further down: estimator error versus inner-loop length, the KL-based error
bound, the asymptotic variance of the cross-validated objective, and the
optimality of the posterior-predictive decision rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, stats

from ._validation import NumericError
from .gaussian import DiagGaussian, PriorGrad, expected_prior_score, score_from_moments
from .nn import Dataset

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class FullGaussian:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_diag(self) -> DiagGaussian:
        """Marginal variances only (drops correlations)."""
        return DiagGaussian.from_var(self.mean, np.diag(self.cov))

    @classmethod
    def from_diag(cls, q: DiagGaussian) -> "FullGaussian":
        return cls(q.mean.copy(), np.diag(q.var))


@dataclass(frozen=True, eq=False)
class ConjugateModel:
    """Design matrix ``X`` (m x p), noise variance and a diagonal prior over p coefficients."""

    X: np.ndarray
    noise_var: float
    prior: DiagGaussian

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] != self.prior.dim:
            raise ValueError(f"design of shape {X.shape} does not match prior dimension {self.prior.dim}")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_prior(self, prior: DiagGaussian) -> "ConjugateModel":
        return ConjugateModel(self.X, self.noise_var, prior)

    def rows(self, idx) -> "ConjugateModel":
        return ConjugateModel(self.X[idx], self.noise_var, self.prior)


def _y(model: ConjugateModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != model.m:
        raise ValueError(f"y has {y.shape[0]} entries but the design has {model.m} rows")
    return y


def exact_posterior(model: ConjugateModel, y) -> FullGaussian:
    y = _y(model, y)
    prec0 = np.exp(-model.prior.log_var)
    P = model.X.T @ model.X / model.noise_var + np.diag(prec0)
    rhs = prec0 * model.prior.mean + model.X.T @ y / model.noise_var
    try:
        c = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("posterior precision is not positive definite") from exc
    mean = linalg.cho_solve(c, rhs)
    cov = linalg.cho_solve(c, np.eye(model.p))
    return FullGaussian(mean, 0.5 * (cov + cov.T))


def _marginal_parts(model: ConjugateModel, y):
    y = _y(model, y)
    X = model.X
    C = (X * model.prior.var) @ X.T + model.noise_var * np.eye(model.m)
    r = y - X @ model.prior.mean
    try:
        c = linalg.cho_factor(C, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("marginal covariance is not positive definite") from exc
    return c, r


def exact_log_marginal(model: ConjugateModel, y) -> float:
    """``log N(y; X mu0, X Sigma0 X^T + s2 I)``; zero for an empty dataset."""
    if model.m == 0:
        return 0.0
    c, r = _marginal_parts(model, y)
    alpha = linalg.cho_solve(c, r)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * (r @ alpha) - 0.5 * logdet - 0.5 * model.m * LOG_2PI)


def exact_marginal_grad(model: ConjugateModel, y) -> PriorGrad:
    """Gradient of the log marginal likelihood w.r.t. the prior's (mean, log_var)."""
    if model.m == 0:
        return PriorGrad.zeros(model.p)
    c, r = _marginal_parts(model, y)
    X = model.X
    alpha = linalg.cho_solve(c, r)
    Cinv_X = linalg.cho_solve(c, X)
    xa = X.T @ alpha
    d_mean = xa
    # dC/dv_j = x_j x_j^T, chained through v_j = exp(log_var_j)
    d_log_var = 0.5 * model.prior.var * (xa * xa - np.einsum("ij,ij->j", X, Cinv_X))
    return PriorGrad(d_mean, d_log_var)


def expected_prior_score_full(posterior: FullGaussian, prior: DiagGaussian) -> PriorGrad:
    """Expected prior score under a full-covariance law; only its marginal variances matter."""
    return score_from_moments(posterior.mean, np.diag(posterior.cov), prior)


def log_predictive(model_tr: ConjugateModel, y_tr, X_val, y_val, rule: Optional[FullGaussian] = None) -> float:
    """``log p(y_val | y_tr)`` under ``rule`` (default: the exact posterior given y_tr)."""
    X_val = np.asarray(X_val, dtype=np.float64).reshape(-1, model_tr.p)
    y_val = np.asarray(y_val, dtype=np.float64).reshape(-1)
    if y_val.size == 0:
        return 0.0
    q = exact_posterior(model_tr, y_tr) if rule is None else rule
    cov = X_val @ q.cov @ X_val.T + model_tr.noise_var * np.eye(y_val.size)
    return float(stats.multivariate_normal.logpdf(y_val, X_val @ q.mean, cov))


# ----------------------------------------------------------------------------
# analytic ELBO for a diagonal posterior and the unrolled inner loop
# ----------------------------------------------------------------------------


def _suff(model: ConjugateModel, y):
    y = _y(model, y)
    s2 = model.noise_var
    return model.X.T @ model.X / s2, model.X.T @ y / s2, float(y @ y) / s2


def analytic_elbo(model: ConjugateModel, y, lam: DiagGaussian) -> float:
    """Exact ELBO (no sampling) of a diagonal posterior on the conjugate model."""
    A, b, c = _suff(model, y)
    m, v = lam.mean, lam.var
    ell = -0.5 * (c - 2 * b @ m + m @ A @ m + np.diag(A) @ v) - 0.5 * model.m * math.log(2 * math.pi * model.noise_var)
    pr = model.prior
    kl = 0.5 * np.sum(v / pr.var + (m - pr.mean) ** 2 / pr.var - 1.0 + pr.log_var - lam.log_var)
    return float(ell - kl)


def analytic_elbo_grad(model: ConjugateModel, y, lam: DiagGaussian) -> PriorGrad:
    """Gradient of :func:`analytic_elbo` w.r.t. the posterior's (mean, log_var)."""
    A, b, _ = _suff(model, y)
    pr = model.prior
    m, v = lam.mean, lam.var
    g_m = -A @ m + b - (m - pr.mean) / pr.var
    g_s = -0.5 * np.diag(A) * v - 0.5 * (v / pr.var - 1.0)
    return PriorGrad(g_m, g_s)


@dataclass
class UnrolledVI:
    """Iterates of deterministic ELBO ascent and the Jacobian of the last iterate w.r.t. the prior."""

    lambdas: list
    jacobian: np.ndarray


def _unroll(model: ConjugateModel, y, lr: float):
    """Yield ``(t, lambda_t, d lambda_t / d prior)`` for t = 0, 1, 2, ... forever.

    Each step is plain gradient ascent on the analytic ELBO starting from
    lambda = prior. Orderings are (mean, log_var) on both Jacobian axes.
    """
    A, b, _ = _suff(model, y)
    pr = model.prior
    p = model.p
    mu0, vp = pr.mean, pr.var
    dA = np.diag(A)
    m, s = mu0.copy(), pr.log_var.copy()
    J = np.eye(2 * p)
    H = np.zeros((2 * p, 2 * p))
    HT = np.zeros((2 * p, 2 * p))
    t = 0
    while True:
        yield t, DiagGaussian(m, s), J
        v = np.exp(s)
        g_m = -A @ m + b - (m - mu0) / vp
        g_s = -0.5 * dA * v - 0.5 * (v / vp - 1.0)
        H[:p, :p] = -A - np.diag(1.0 / vp)
        H[p:, p:] = np.diag(-0.5 * dA * v - 0.5 * v / vp)
        HT[:p, :p] = np.diag(1.0 / vp)
        HT[:p, p:] = np.diag((m - mu0) / vp)
        HT[p:, p:] = np.diag(0.5 * v / vp)
        # overflow is reported as NumericError below
        with np.errstate(over="ignore", invalid="ignore"):
            J = J + lr * (H @ J + HT)
            m = m + lr * g_m
            s = s + lr * g_s
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s)) and np.all(np.isfinite(J))):
            raise NumericError(f"unrolled inner loop diverged at step {t}; reduce the learning rate", step=t)
        t += 1


def unrolled_vi(model: ConjugateModel, y, steps: int, lr: float) -> UnrolledVI:
    """``steps`` gradient-ascent steps on the analytic ELBO from lambda = prior."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    lams = []
    for t, lam, J in _unroll(model, y, lr):
        lams.append(lam)
        if t == steps:
            return UnrolledVI(lams, J)


def _elbo_grad_from(model, y, lam, J) -> np.ndarray:
    g_lam = analytic_elbo_grad(model, y, lam).as_vector()
    return g_lam @ J + expected_prior_score(lam, model.prior).as_vector()


def elbo_gradient_estimate(model: ConjugateModel, y, vi_steps: int, lr: float) -> PriorGrad:
    """Meta-gradient obtained by differentiating the ELBO through the unrolled inner loop."""
    run = unrolled_vi(model, y, vi_steps, lr)
    total = _elbo_grad_from(model, y, run.lambdas[-1], run.jacobian)
    return PriorGrad(total[: model.p], total[model.p :])


def gem_gradient_estimate(model: ConjugateModel, y, vi_steps: int, lr: float) -> PriorGrad:
    """Gradient-EM estimate evaluated on the same deterministic inner-loop iterate."""
    lam = unrolled_vi(model, y, vi_steps, lr).lambdas[-1]
    return expected_prior_score(lam, model.prior)


def grad_error_curve(model: ConjugateModel, y, steps_grid: Sequence[int], lr: float) -> np.ndarray:
    """Errors of both estimators against the exact gradient for each T in the grid.

    One inner-loop run is shared: the estimators at step T see the same iterate.
    Returns shape ``(len(steps_grid), 2)``; columns are GEM, ELBO-gradient.
    """
    exact = exact_marginal_grad(model, y).as_vector()
    want = {T: i for i, T in enumerate(steps_grid)}
    out = np.empty((len(steps_grid), 2))
    for t, lam, J in _unroll(model, y, lr):
        if t in want:
            gem = expected_prior_score(lam, model.prior).as_vector()
            elbo = _elbo_grad_from(model, y, lam, J)
            out[want[t]] = np.linalg.norm(gem - exact), np.linalg.norm(elbo - exact)
        if t >= max(steps_grid):
            return out


def random_conjugate_problem(rng: np.random.Generator, p: int, m: int, orthogonal: bool = False, noise_var=None):
    """A randomised model and observation vector with well-conditioned defaults.

    With ``orthogonal`` the design columns are mutually orthogonal, which
    makes the exact posterior diagonal so that mean-field inference is exact.
    """
    X = rng.standard_normal((m, p))
    if orthogonal and m >= p:
        Q, _ = np.linalg.qr(X)
        X = Q * rng.uniform(0.5, 2.0, size=p) * math.sqrt(m)
    prior = DiagGaussian(rng.normal(0.0, 1.0, p), rng.uniform(-1.0, 1.0, p))
    s2 = rng.uniform(0.25, 2.0) if noise_var is None else noise_var
    theta = prior.mean + prior.std * rng.standard_normal(p)
    y = X @ theta + math.sqrt(s2) * rng.standard_normal(m)
    return ConjugateModel(X, s2, prior), y


def grad_error_problem(rng: np.random.Generator, p: int = 2, m: int = 10, precision=(0.5, 2.0)):
    """Problem family for the estimator-error study.

    Orthogonal design columns give a diagonal exact posterior, so the
    mean-field inner loop converges to it and both estimators become exact
    as the number of steps grows. Per-coordinate data precision is drawn
    from ``precision``; the prior has unit variance and unit noise is used.
    The true coefficients are drawn from a prior twice as wide, so the data
    pull the posterior well away from the prior.
    """
    if m < p:
        raise ValueError("need m >= p for orthogonal columns")
    Q, _ = np.linalg.qr(rng.standard_normal((m, p)))
    X = Q * np.sqrt(rng.uniform(*precision, size=p))
    prior = DiagGaussian(rng.normal(0.0, 1.0, p), np.zeros(p))
    theta = prior.mean + 2.0 * rng.standard_normal(p)
    y = X @ theta + rng.standard_normal(m)
    return ConjugateModel(X, 1.0, prior), y


# ----------------------------------------------------------------------------
# KL error bound
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    error: float
    kl: float
    M: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.error <= self.bound + 1e-9


def kl_diag_full(q: DiagGaussian, p: FullGaussian) -> float:
    """KL(q || p) for diagonal q and full-covariance p."""
    c = linalg.cho_factor(p.cov, lower=True)
    d = p.dim
    diff = p.mean - q.mean
    tr = np.trace(linalg.cho_solve(c, np.diag(q.var)))
    maha = diff @ linalg.cho_solve(c, diff)
    logdet_p = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(0.5 * (tr + maha - d + logdet_p - np.sum(q.log_var)))


def score_second_moment(post: FullGaussian, prior: DiagGaussian, components: str = "both") -> float:
    """``E_post ||grad_prior log N(theta; prior)||^2`` in closed form."""
    u_mean = post.mean - prior.mean
    S = np.diag(post.cov)
    vp = prior.var
    Eu2 = S + u_mean**2
    Eu4 = 3 * S**2 + 6 * S * u_mean**2 + u_mean**4
    mean_part = np.sum(Eu2 / vp**2)
    lv_part = np.sum((Eu4 / vp**2 - 2 * Eu2 / vp + 1.0) / 4.0)
    if components == "mean":
        return float(mean_part)
    if components == "log_var":
        return float(lv_part)
    return float(mean_part + lv_part)


def _pick(g: PriorGrad, components):
    if components == "mean":
        return g.d_mean
    if components == "log_var":
        return g.d_log_var
    return g.as_vector()


def pinsker_report(target: FullGaussian, prior: DiagGaussian, q: DiagGaussian, components: str = "both") -> BoundReport:
    """Error of the prior score averaged under ``q`` instead of ``target``, and its KL bound."""
    g_true = expected_prior_score_full(target, prior)
    g_q = expected_prior_score(q, prior)
    err = float(np.linalg.norm(_pick(g_q, components) - _pick(g_true, components)))
    k = max(kl_diag_full(q, target), 0.0)
    M = math.sqrt(score_second_moment(target, prior, components))
    return BoundReport(err, k, M, math.sqrt(2.0) * M * math.sqrt(k))


def pinsker_bound_study(model: ConjugateModel, y, perturbations: Sequence[DiagGaussian], components: str = "both") -> list:
    target = exact_posterior(model, y)
    return [pinsker_report(target, model.prior, q, components) for q in perturbations]


def mean_field_approx(post: FullGaussian) -> DiagGaussian:
    """KL(q||p)-optimal diagonal Gaussian: same mean, variances 1 / diag(precision)."""
    prec = np.linalg.inv(post.cov)
    return DiagGaussian.from_var(post.mean, 1.0 / np.diag(prec))


def local_perturbations(post: FullGaussian, rng: np.random.Generator, n: int, mean_scale=0.1, log_var_scale=0.1) -> list:
    """Diagonal Gaussians near the mean-field approximation of ``post``.

    Mean offsets are in units of the marginal posterior std.
    """
    base = mean_field_approx(post)
    out = []
    for _ in range(n):
        dm = mean_scale * base.std * rng.standard_normal(base.dim)
        dl = log_var_scale * rng.standard_normal(base.dim)
        out.append(DiagGaussian(base.mean + dm, base.log_var + dl))
    return out


# ----------------------------------------------------------------------------
# Property 1 residual and the posterior-predictive decision rule
# ----------------------------------------------------------------------------


def l2_decomposition_check(model: ConjugateModel, y_tr, y_val) -> float:
    """``log p(y_val | y_tr) - [log p(y_tr, y_val) - log p(y_tr)]``.

    ``model.X`` holds the training rows followed by the validation rows.
    """
    y_tr = np.asarray(y_tr, dtype=np.float64).reshape(-1)
    y_val = np.asarray(y_val, dtype=np.float64).reshape(-1)
    k = y_tr.size
    if k + y_val.size != model.m:
        raise ValueError("y_tr and y_val sizes must add up to the design rows")
    tr = model.rows(slice(0, k))
    lhs = log_predictive(tr, y_tr, model.X[k:], y_val)
    rhs = exact_log_marginal(model, np.concatenate([y_tr, y_val])) - exact_log_marginal(tr, y_tr)
    return lhs - rhs


def exact_rule(model_tr: ConjugateModel, y_tr) -> FullGaussian:
    return exact_posterior(model_tr, y_tr)


def shifted_mean_rule(shift: float) -> Callable:
    def rule(model_tr, y_tr):
        q = exact_posterior(model_tr, y_tr)
        return FullGaussian(q.mean + shift, q.cov)

    rule.__name__ = f"shifted_mean({shift:g})"
    return rule


def inflated_variance_rule(factor: float) -> Callable:
    def rule(model_tr, y_tr):
        q = exact_posterior(model_tr, y_tr)
        return FullGaussian(q.mean, q.cov * factor)

    rule.__name__ = f"inflated_variance({factor:g})"
    return rule


@dataclass
class RuleScore:
    name: str
    mean_score: float
    std_err: float
    mean_gap: float  # exact-rule score minus this rule's, averaged over tasks
    p_value: float  # one-sided paired t-test that the exact rule scores higher


def posterior_predictive_optimality_check(family, n_tasks: int, candidate_rules: dict, rng_seed, m: int = 10, k_split: int = 5) -> list:
    """Monte Carlo estimate of ``E_tau log p(D_val | rule(D_tr))`` per candidate rule.

    ``family`` is a :class:`~gembml.tasks.ConjugateTaskFamily` whose prior is
    the true task distribution; the rule named ``"exact"`` must be present.
    """
    from .tasks import sample_conjugate_task

    if "exact" not in candidate_rules:
        raise ValueError("candidate_rules must include the 'exact' rule")
    prior = DiagGaussian.from_var(family.prior_mean, family.prior_var)
    seeds = np.random.SeedSequence(rng_seed).spawn(n_tasks)
    scores = {name: np.empty(n_tasks) for name in candidate_rules}
    for i, ss in enumerate(seeds):
        task, _ = sample_conjugate_task(family, ss, m, k_split)
        model_tr = ConjugateModel(task.train.inputs, family.noise_var, prior)
        y_tr = task.train.targets[:, 0]
        for name, rule in candidate_rules.items():
            q = rule(model_tr, y_tr)
            scores[name][i] = log_predictive(model_tr, y_tr, task.val.inputs, task.val.targets[:, 0], rule=q)
    base = scores["exact"]
    out = []
    for name, s in scores.items():
        gap = base - s
        if name == "exact" or np.all(gap == 0):
            p = 1.0
        else:
            p = float(stats.ttest_rel(base, s, alternative="greater").pvalue)
        out.append(RuleScore(name, float(s.mean()), float(s.std(ddof=1) / math.sqrt(n_tasks)), float(gap.mean()), p))
    return out


# ----------------------------------------------------------------------------
# asymptotic variance of the cross-validated estimator
# ----------------------------------------------------------------------------


@dataclass
class VarianceRatioResult:
    k: int
    m: int
    ratio: float
    ci_low: float
    ci_high: float
    predicted: float  # m / (m - k)
    predicted_exact: float  # finite prior-variance value for this family
    var_l1: float
    var_l2: float
    estimates: np.ndarray = field(repr=False)  # (n_replicates, 2): L1, L2 estimates


def mean_estimators(Y: np.ndarray, k: int, prior_var: float, noise_var: float):
    """Maximisers of the summed L1 and L2 objectives over the prior mean.

    ``Y`` has shape ``(..., n_tasks, m)`` for the all-ones design with known
    prior variance; both objectives are concave quadratics in the mean so
    the maximiser solves a linear score equation.
    """
    m = Y.shape[-1]

    def ab(n, sums):
        denom = noise_var + n * prior_var
        return n / denom, sums / denom

    a_all, b_all = ab(m, Y.sum(axis=-1))
    l1 = b_all.sum(axis=-1) / (a_all * Y.shape[-2])
    if k == 0:
        return l1, l1.copy()
    a_tr, b_tr = ab(k, Y[..., :k].sum(axis=-1))
    l2 = (b_all - b_tr).sum(axis=-1) / ((a_all - a_tr) * Y.shape[-2])
    return l1, l2


def predicted_variance_ratio(k: int, m: int, prior_var: float = 0.0, noise_var: float = 1.0) -> float:
    """Exact var(L2 estimate) / var(L1 estimate) for the all-ones location family.

    Reduces to m / (m - k) as prior_var / noise_var -> 0.
    """
    if k == 0:
        return 1.0
    return m / (m - k) * (1.0 + k * prior_var / noise_var)


def variance_ratio_study(
    k: int,
    m: int,
    n_tasks: int,
    n_replicates: int,
    rng_seed,
    prior_mean: float = 0.0,
    prior_var: float = 1e-3,
    noise_var: float = 1.0,
    n_boot: int = 2000,
) -> VarianceRatioResult:
    """Replicated estimate of var(L2 estimator) / var(L1 estimator) with a bootstrap CI."""
    if not 0 <= k < m:
        raise ValueError("need 0 <= k < m so that every task has validation data")
    if n_tasks < 100 or n_replicates < 100:
        raise ValueError("n_tasks and n_replicates must both be at least 100")
    rng = np.random.default_rng(rng_seed)
    theta = prior_mean + math.sqrt(prior_var) * rng.standard_normal((n_replicates, n_tasks, 1))
    Y = theta + math.sqrt(noise_var) * rng.standard_normal((n_replicates, n_tasks, m))
    l1, l2 = mean_estimators(Y, k, prior_var, noise_var)
    v1, v2 = l1.var(ddof=1), l2.var(ddof=1)
    ratio = v2 / v1
    idx = rng.integers(0, n_replicates, size=(n_boot, n_replicates))
    boot = l2[idx].var(axis=1, ddof=1) / l1[idx].var(axis=1, ddof=1)
    lo, hi = np.quantile(boot, [0.025, 0.975])
    return VarianceRatioResult(
        k, m, float(ratio), float(lo), float(hi),
        predicted_variance_ratio(k, m), predicted_variance_ratio(k, m, prior_var, noise_var),
        float(v1), float(v2), np.column_stack([l1, l2]),
    )


# ----------------------------------------------------------------------------
# plugging the exact posterior into the meta-learning loop
# ----------------------------------------------------------------------------


class LinearGaussianLikelihood:
    """``y = x^T theta + N(0, noise_var)``; dataset inputs are design rows."""

    def __init__(self, p: int, noise_var: float = 1.0):
        self.p = int(p)
        self.noise_var = float(noise_var)

    @property
    def dim(self) -> int:
        return self.p

    def nll_and_grad_batch(self, P, data: Dataset):
        P = np.atleast_2d(P)
        r = P @ data.inputs.T - data.targets[:, 0][None, :]
        nll = 0.5 * np.sum(r * r, axis=1) / self.noise_var + 0.5 * r.shape[1] * math.log(2 * math.pi * self.noise_var)
        return nll, r @ data.inputs / self.noise_var

    def predict(self, params, X):
        return np.asarray(X, dtype=np.float64) @ np.asarray(params)[:, None]


def exact_inference(noise_var: float):
    """Inner-loop replacement returning the exact posterior, projected to its marginals.

    Matches the engine call signature used by the meta-gradient routines:
    ``(prior, init, data, cfg, seed) -> VIResult``. Exact for one-dimensional
    parameters and for designs with orthogonal columns.
    """
    from .vi import VIResult

    def infer(prior: DiagGaussian, init, data: Dataset, cfg=None, seed=None):
        if len(data) == 0:
            return VIResult(prior, [])
        model = ConjugateModel(data.inputs, noise_var, prior)
        return VIResult(exact_posterior(model, data.targets[:, 0]).to_diag(), [])

    return infer
