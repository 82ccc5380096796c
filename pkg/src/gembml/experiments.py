"""Study drivers behind the command-line subcommands.

Each driver takes a resolved config dict and returns plain rows plus a
summary dict; writing files is left to the caller. Every random draw is
seeded from ``cfg["seed"]`` through :func:`~gembml.meta.derive_seed`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import config as config_mod
from .gaussian import DiagGaussian, expected_prior_score, delta_limit_score, kl, kl_grad_q
from .meta import (
    DELTA_METHODS,
    MetaParams,
    SinusoidSampler,
    derive_seed,
    init_meta_params,
    meta_test,
    meta_train,
)
from .nn import ArchSpec, Dataset, MLPLikelihood, finite_diff_grad, init_params, nll_and_grad
from .oracle import (
    FullGaussian,
    analytic_elbo,
    analytic_elbo_grad,
    elbo_gradient_estimate,
    exact_log_marginal,
    exact_marginal_grad,
    exact_posterior,
    expected_prior_score_full,
    grad_error_curve,
    grad_error_problem,
    inflated_variance_rule,
    exact_rule,
    l2_decomposition_check,
    local_perturbations,
    pinsker_bound_study,
    pinsker_report,
    posterior_predictive_optimality_check,
    random_conjugate_problem,
    shifted_mean_rule,
    unrolled_vi,
    variance_ratio_study,
)
from .tasks import ConjugateTaskFamily
from .vi import _expected_loglik, elbo_estimate, point_fit, vi_fit

# ----------------------------------------------------------------------------
# gradient checks
# ----------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest relative error; components with ``|numeric| < floor`` are compared absolutely."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.where(np.abs(n) < floor, 1.0, np.abs(n))
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def _sine_data(seed, n_in=1, n_out=1, K=6):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (K, n_in))
    y = np.sin(x @ rng.standard_normal((n_in, n_out))) + 0.1 * rng.standard_normal((K, n_out))
    return Dataset(x, y)


def _nn_check(layers, activation, seed):
    def run():
        arch = ArchSpec(layers, activation)
        rng = np.random.default_rng(seed)
        params = init_params(arch, rng, scale=0.5)
        data = _sine_data(seed, arch.n_in, arch.n_out)
        _, g = nll_and_grad(arch, params, data, 0.7)
        fd = finite_diff_grad(lambda p: nll_and_grad(arch, p, data, 0.7)[0], params)
        return g, fd
    return run


def _hand_neuron():
    arch = ArchSpec((1, 1), "identity")
    nll, g = nll_and_grad(arch, np.zeros(2), Dataset([[1.0]], [[2.0]]), 1.0)
    # parameters are (w, b); both see input 1 so both derivatives equal -2
    return np.array([nll, g[0]]), np.array([2.0 + 0.5 * math.log(2 * math.pi), -2.0])


def _rand_gauss(rng, d):
    return DiagGaussian(rng.normal(0, 1, d), rng.uniform(-1, 1, d))


def _kl_grad_check():
    rng = np.random.default_rng(11)
    q, p = _rand_gauss(rng, 4), _rand_gauss(rng, 4)
    d = q.dim
    f = lambda v: kl(DiagGaussian(v[:d], v[d:]), p)
    return kl_grad_q(q, p).as_vector(), finite_diff_grad(f, np.concatenate([q.mean, q.log_var]))


def _prior_score_check():
    rng = np.random.default_rng(12)
    q, p = _rand_gauss(rng, 4), _rand_gauss(rng, 4)
    d = q.dim
    f = lambda v: -kl(q, DiagGaussian(v[:d], v[d:]))
    return expected_prior_score(q, p).as_vector(), finite_diff_grad(f, np.concatenate([p.mean, p.log_var]))


def _delta_limit_check():
    rng = np.random.default_rng(13)
    p = _rand_gauss(rng, 4)
    mu = rng.normal(0, 1, 4)
    full = expected_prior_score(DiagGaussian(mu, np.full(4, -20.0)), p)
    return delta_limit_score(mu, p).d_mean, full.d_mean


def _elbo_grad_check():
    arch = ArchSpec((1, 4, 1), "tanh")
    model = MLPLikelihood(arch, 0.5)
    rng = np.random.default_rng(14)
    d = arch.n_params
    lam = DiagGaussian(rng.normal(0, 0.5, d), rng.uniform(-3, -1, d))
    prior = DiagGaussian(np.zeros(d), np.full(d, -1.0))
    data = _sine_data(14)
    eps = rng.standard_normal((3, d))
    _, gm, gl = _expected_loglik(model, lam, data, eps)
    kg = kl_grad_q(lam, prior)
    analytic = np.concatenate([gm - kg.d_mean, gl - kg.d_log_var])
    f = lambda v: elbo_estimate(DiagGaussian(v[:d], v[d:]), prior, model, data, eps)
    return analytic, finite_diff_grad(f, np.concatenate([lam.mean, lam.log_var]))


def _conj_problem(seed, p=3, m=6):
    return random_conjugate_problem(np.random.default_rng(seed), p, m)


def _split_prior(model, v):
    p = model.p
    return model.with_prior(DiagGaussian(v[:p], v[p:]))


def _marginal_grad_check():
    model, y = _conj_problem(15)
    f = lambda v: exact_log_marginal(_split_prior(model, v), y)
    return exact_marginal_grad(model, y).as_vector(), finite_diff_grad(f, np.concatenate([model.prior.mean, model.prior.log_var]))


def _gem_identity_check():
    model, y = _conj_problem(16)
    return expected_prior_score_full(exact_posterior(model, y), model.prior).as_vector(), exact_marginal_grad(model, y).as_vector()


def _analytic_elbo_check():
    model, y = _conj_problem(17)
    rng = np.random.default_rng(17)
    lam = _rand_gauss(rng, model.p)
    p = model.p
    f = lambda v: analytic_elbo(model, y, DiagGaussian(v[:p], v[p:]))
    return analytic_elbo_grad(model, y, lam).as_vector(), finite_diff_grad(f, np.concatenate([lam.mean, lam.log_var]))


def _unrolled_check():
    model, y = _conj_problem(18, p=2, m=5)
    T, lr = 5, 0.05

    def f(v):
        mdl = _split_prior(model, v)
        return analytic_elbo(mdl, y, unrolled_vi(mdl, y, T, lr).lambdas[-1])

    v0 = np.concatenate([model.prior.mean, model.prior.log_var])
    return elbo_gradient_estimate(model, y, T, lr).as_vector(), finite_diff_grad(f, v0)


# name -> (check function returning (analytic, reference), tolerance)
GRADIENT_CHECKS: dict[str, tuple[Callable, float]] = {
    "nn.relu_1_40_40_1": (_nn_check((1, 40, 40, 1), "relu", 1), 1e-4),
    "nn.tanh_2_8_3": (_nn_check((2, 8, 3), "tanh", 2), 1e-4),
    "nn.identity_3_2_1": (_nn_check((3, 2, 1), "identity", 3), 1e-4),
    "nn.linear_neuron_hand": (_hand_neuron, 1e-12),
    "gaussian.kl_grad": (_kl_grad_check, 1e-4),
    "gaussian.expected_prior_score": (_prior_score_check, 1e-4),
    "gaussian.delta_limit": (_delta_limit_check, 1e-6),
    "vi.elbo_grad": (_elbo_grad_check, 1e-4),
    "oracle.marginal_grad": (_marginal_grad_check, 1e-4),
    "oracle.gem_identity": (_gem_identity_check, 1e-10),
    "oracle.analytic_elbo_grad": (_analytic_elbo_check, 1e-4),
    "oracle.unrolled_elbo_grad": (_unrolled_check, 1e-4),
}


def run_gradcheck(cfg: dict) -> list:
    """Run every registered check. ``gradcheck.inject_fault`` names a check whose analytic side is negated."""
    fault = cfg.get("gradcheck.inject_fault", "")
    if fault and fault not in GRADIENT_CHECKS:
        from ._validation import ConfigError

        raise ConfigError(f"unknown check {fault!r} for gradcheck.inject_fault")
    out = []
    for name, (fn, tol) in GRADIENT_CHECKS.items():
        analytic, reference = fn()
        if name == fault:
            analytic = -np.asarray(analytic)
        out.append(CheckResult(name, max_rel_error(analytic, reference), tol))
    return out


# ----------------------------------------------------------------------------
# estimator error versus inner-loop length
# ----------------------------------------------------------------------------


def grad_error_study(cfg: dict):
    grid = list(cfg["grad_error.steps"])
    raw = []
    curves = []
    for i in range(cfg["grad_error.n_problems"]):
        rng = np.random.default_rng(derive_seed(cfg["seed"], i))
        model, y = grad_error_problem(rng, cfg["grad_error.p"], cfg["grad_error.m"])
        c = grad_error_curve(model, y, grid, cfg["grad_error.lr"])
        curves.append(c)
        raw.extend((i, T, float(g), float(e)) for T, (g, e) in zip(grid, c))
    med = np.median(np.array(curves), axis=0)
    rows = [(T, float(g), float(e)) for T, (g, e) in zip(grid, med)]
    summary = {
        "median_gem_error": {str(T): g for T, g, _ in rows},
        "median_elbo_error": {str(T): e for T, _, e in rows},
        "gem_better_at": [T for T, g, e in rows if g <= e],
        "checks": {
            "ordering_gem_le_elbo_all_T": all(g <= e for _, g, e in rows),
            "both_decrease": bool(med[-1, 0] < med[0, 0] and med[-1, 1] < med[0, 1]),
            "largest_T_converged": bool(med[-1, 0] <= 1e-4 and med[-1, 1] <= 1e-4),
        },
    }
    return rows, raw, summary


# ----------------------------------------------------------------------------
# theory studies
# ----------------------------------------------------------------------------


def variance_ratio(cfg: dict):
    k, m = cfg["variance_ratio.k"], cfg["variance_ratio.m"]
    nt, nr = cfg["variance_ratio.n_tasks"], cfg["variance_ratio.n_replicates"]
    pv = cfg["variance_ratio.prior_var"]
    main = variance_ratio_study(k, m, nt, nr, derive_seed(cfg["seed"], 0), prior_var=pv)
    null = variance_ratio_study(0, m, nt, nr, derive_seed(cfg["seed"], 1), prior_var=pv)
    rows = [(i, float(a), float(b)) for i, (a, b) in enumerate(main.estimates)]
    summary = {
        "k": k, "m": m, "ratio": main.ratio, "ci95": [main.ci_low, main.ci_high],
        "predicted": main.predicted, "predicted_finite_prior_var": main.predicted_exact,
        "k0_ratio": null.ratio, "k0_ci95": [null.ci_low, null.ci_high],
        "checks": {
            "ratio_within_15pct": bool(abs(main.ratio / main.predicted - 1.0) <= 0.15),
            "k0_ci_contains_1": bool(null.ci_low <= 1.0 <= null.ci_high),
        },
    }
    return rows, summary


def mean_shift_example(shift: float = 0.1):
    """Target N(0,1), prior N(0,1), Q = N(shift, 1): error and bound both equal ``shift``."""
    target = FullGaussian(np.zeros(1), np.eye(1))
    prior = DiagGaussian(np.zeros(1), np.zeros(1))
    return pinsker_report(target, prior, DiagGaussian(np.array([shift]), np.zeros(1)), components="mean")


def pinsker(cfg: dict):
    rows = []
    for i in range(cfg["pinsker.n_problems"]):
        rng = np.random.default_rng(derive_seed(cfg["seed"], i))
        p = (1, 2, 5)[i % 3]
        model, y = random_conjugate_problem(rng, p, int(rng.integers(1, 21)))
        perts = local_perturbations(exact_posterior(model, y), rng, cfg["pinsker.per_problem"],
                                    cfg["pinsker.mean_scale"], cfg["pinsker.log_var_scale"])
        for j, r in enumerate(pinsker_bound_study(model, y, perts)):
            rows.append((i, j, p, r.error, r.kl, r.M, r.bound, int(r.holds)))
    ex = mean_shift_example(0.1)
    violations = sum(1 for r in rows if not r[-1])
    summary = {
        "n_reports": len(rows), "violations": violations,
        "max_error_over_bound": max((r[3] / r[6] for r in rows if r[6] > 0), default=0.0),
        "mean_shift": {"error": ex.error, "bound": ex.bound, "kl": ex.kl, "M": ex.M},
        "checks": {
            "zero_violations": violations == 0,
            "mean_shift_equality": bool(abs(ex.error - 0.1) <= 1e-12 and abs(ex.bound - 0.1) <= 1e-12),
        },
    }
    return rows, summary


def l2_check(cfg: dict):
    rows = []
    n = cfg["l2_check.n_splits"]
    for i in range(n):
        rng = np.random.default_rng(derive_seed(cfg["seed"], i))
        p = (1, 2, 5)[i % 3]
        m = int(rng.integers(0, 13))
        # force the empty-set edges regularly
        k = 0 if i % 10 == 0 else m if i % 10 == 1 else int(rng.integers(0, m + 1))
        model, _ = random_conjugate_problem(rng, p, max(m, 1))
        model = model.rows(slice(0, m))
        y = rng.standard_normal(m) * 2.0
        rows.append((i, p, k, m - k, l2_decomposition_check(model, y[:k], y[k:])))
    worst = max(abs(r[-1]) for r in rows)
    summary = {"n_splits": n, "max_abs_residual": worst, "checks": {"residual_le_1e-9": bool(worst <= 1e-9)}}
    return rows, summary


def predictive_optimality(cfg: dict):
    rules = {
        "exact": exact_rule,
        "shifted_mean": shifted_mean_rule(cfg["predictive.shift"]),
        "inflated_variance": inflated_variance_rule(cfg["predictive.inflate"]),
    }
    scores = posterior_predictive_optimality_check(ConjugateTaskFamily(), cfg["predictive.n_tasks"], rules, cfg["seed"])
    rows = [(s.name, s.mean_score, s.std_err, s.mean_gap, s.p_value) for s in scores]
    others = [s for s in scores if s.name != "exact"]
    summary = {
        "scores": {s.name: s.mean_score for s in scores},
        "p_values": {s.name: s.p_value for s in others},
        "checks": {"exact_rule_best": all(s.mean_gap > 0 and s.p_value < 0.01 for s in others)},
    }
    return rows, summary


THEORY_STUDIES = {
    "variance_ratio": (variance_ratio, ("replicate", "l1_estimate", "l2_estimate")),
    "pinsker": (pinsker, ("problem", "perturbation", "p", "error", "kl", "M", "bound", "holds")),
    "l2_check": (l2_check, ("split", "p", "k_train", "k_val", "residual")),
    "predictive_optimality": (predictive_optimality, ("rule", "mean_score", "std_err", "mean_gap_to_exact", "p_value")),
}


# ----------------------------------------------------------------------------
# sinusoid meta-learning and the neighbourhood study
# ----------------------------------------------------------------------------


def sine_model(cfg: dict) -> MLPLikelihood:
    return MLPLikelihood(config_mod.arch(cfg), cfg["noise_var"])


def sine_sampler(cfg: dict) -> SinusoidSampler:
    return SinusoidSampler(cfg["task.setting"], cfg["task.K"], cfg["task.k_split"])


def heldout_tasks(cfg: dict, n: int, stream: int = 1) -> list:
    """Held-out tasks; seeds never collide with the (iteration, task) training seeds."""
    s = sine_sampler(cfg)
    return [s(derive_seed(cfg["seed"], 2**40 + stream, i)) for i in range(n)]


def run_sine(cfg: dict, checkpoint: Optional[Callable] = None):
    """Meta-train then meta-test on fresh tasks, with an untrained-prior control."""
    mcfg = config_mod.meta_config(cfg)
    model = sine_model(cfg)
    init = init_meta_params(model.dim, mcfg)
    train = meta_train(sine_sampler(cfg), mcfg, model, init=init, jobs=cfg["jobs"], checkpoint=checkpoint)
    tasks = heldout_tasks(cfg, cfg["test.n_tasks"])
    trained = meta_test(train.params, tasks, mcfg, model, seed=derive_seed(cfg["seed"], 3))
    control = meta_test(init, tasks, mcfg, model, seed=derive_seed(cfg["seed"], 3)) if cfg["test.control"] else None
    last = trained.steps
    mean = trained.mean()
    summary = {
        "iterations": mcfg.iterations,
        "method": mcfg.method,
        "mse_step0": float(mean[0]),
        "mse_final": float(mean[-1]),
        "p_final_lt_step0": trained.improvement_pvalue(last, 0) if last > 0 else 1.0,
        "skipped_tasks": len(train.skipped),
    }
    checks = {"final_lt_step0_p01": bool(last > 0 and summary["p_final_lt_step0"] < 0.01)}
    if control is not None:
        summary["control_mse_final"] = float(control.mean()[-1])
        checks["final_lt_control"] = bool(mean[-1] < control.mean()[-1])
    summary["checks"] = checks
    return train, trained, control, summary


def _adapt_mean(params: MetaParams, data: Dataset, mcfg, model, seed):
    if mcfg.method in DELTA_METHODS:
        return point_fit(model, params.theta.mean, data, mcfg.inner_test)[0]
    return vi_fit(params.theta, params.theta, model, data, mcfg.inner_test, seed).lam.mean


def run_neighborhood(cfg: dict, params: MetaParams):
    """Adapt from the trained prior mean and from random convex combinations of task-adapted means."""
    mcfg = config_mod.meta_config(cfg)
    model = sine_model(cfg)
    seed = cfg["seed"]
    anchors = heldout_tasks(cfg, cfg["neighborhood.n_anchors"], stream=2)
    thetas = np.array([
        _adapt_mean(params, t.pooled, mcfg, model, derive_seed(seed, 5, i)) for i, t in enumerate(anchors)
    ])
    tasks = heldout_tasks(cfg, cfg["neighborhood.n_tasks"], stream=3)
    rng = np.random.default_rng(derive_seed(seed, 6))
    inits = [("trained", params)]
    for c in range(cfg["neighborhood.n_combinations"]):
        w = rng.dirichlet(np.ones(len(thetas)))
        inits.append((f"combo_{c:03d}", MetaParams(params.theta.replace(mean=w @ thetas), params.fixed_variance)))
    rows, finals = [], {}
    for name, ip in inits:
        res = meta_test(ip, tasks, mcfg, model, seed=derive_seed(seed, 7))
        mean = res.mean()
        rows.extend((name, s, float(v)) for s, v in enumerate(mean))
        finals[name] = (float(mean[0]), float(mean[-1]))
    trained_final = finals["trained"][1]
    combo_final = [v[1] for k, v in finals.items() if k != "trained"]
    avg = float(np.mean(combo_final)) if combo_final else float("nan")
    summary = {
        "trained_step0": finals["trained"][0],
        "trained_final": trained_final,
        "combination_final_mean": avg,
        "ratio": avg / trained_final,
        "checks": {"combinations_within_factor": bool(avg <= cfg["neighborhood.factor"] * trained_final)},
    }
    return rows, summary
