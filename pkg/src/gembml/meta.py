"""Outer loop: meta-gradients for the prior and the meta-train / meta-test drivers.

Every gradient routine returns a *descent* direction for the negated
meta-objective, so the outer update is always ``Theta <- Theta - beta * sum(g)``.
The Bayesian routines only ever look at the inner-loop outputs (the fitted
posteriors), never at how they were produced, so any inference engine with
the right call signature can be plugged in.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from ._validation import ConfigError, NumericError
from .gaussian import DiagGaussian, PriorGrad, expected_prior_score
from .nn import Dataset
from .tasks import SplitTask
from .vi import VIConfig, VIResult, point_fit, vi_fit

METHODS = ("gem_bml", "gem_bml_plus", "reptile", "pretrain", "fomaml")
DELTA_METHODS = ("reptile", "pretrain", "fomaml")

# posterior log-variance used to emulate a point-mass posterior inside VI;
# at -20 the residual weight noise still moves ReLU gradients by ~1e-4
COLLAPSED_LOG_VAR = -40.0


@dataclass(frozen=True)
class MetaParams:
    theta: DiagGaussian
    fixed_variance: Optional[float] = None

    def __post_init__(self):
        if self.fixed_variance is not None:
            if not self.fixed_variance > 0:
                raise ConfigError("fixed_variance must be positive")
            lv = np.full(self.theta.dim, math.log(self.fixed_variance))
            if not np.array_equal(self.theta.log_var, lv):
                object.__setattr__(self, "theta", self.theta.replace(log_var=lv))

    @property
    def dim(self) -> int:
        return self.theta.dim

    def to_json(self) -> dict:
        return {"theta": self.theta.to_json(), "fixed_variance": self.fixed_variance}

    @classmethod
    def from_json(cls, obj: dict) -> "MetaParams":
        return cls(DiagGaussian.from_json(obj["theta"]), obj.get("fixed_variance"))


@dataclass(frozen=True)
class MetaConfig:
    method: str = "gem_bml_plus"
    meta_lr: float = 0.001
    meta_batch_size: int = 5
    iterations: int = 20000
    inner: VIConfig = field(default_factory=lambda: VIConfig(steps=1, learning_rate=0.001))
    inner_test: VIConfig = field(default_factory=lambda: VIConfig(steps=10, learning_rate=0.001))
    seed: int = 0
    meta_optimizer: str = "adam"
    # second inner call: "sequential" = VI(lambda_tr, D_val); "pooled" = VI(Theta, D_tr + D_val)
    second_call: str = "sequential"
    fixed_variance: Optional[float] = None
    init_scale: float = 0.05
    init_log_var: float = -4.0
    skip_on_failure: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.iterations < 0 or self.meta_batch_size < 1:
            raise ConfigError("iterations must be >= 0 and meta_batch_size >= 1")
        if not self.meta_lr > 0:
            raise ConfigError("meta_lr must be positive")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown meta_optimizer {self.meta_optimizer!r}")
        if self.second_call not in ("sequential", "pooled"):
            raise ConfigError(f"unknown second_call {self.second_call!r}")
        if self.method in DELTA_METHODS and self.fixed_variance is None:
            raise ConfigError(f"method {self.method} needs fixed_variance")
        if self.fixed_variance is not None and not self.fixed_variance > 0:
            raise ConfigError("fixed_variance must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def with_(self, **kw) -> "MetaConfig":
        return replace(self, **kw)


def collapsed(cfg: MetaConfig, fixed_variance: float = 1.0) -> MetaConfig:
    """Delta regime for the Bayesian methods: frozen prior variance, point-mass posteriors."""
    return cfg.with_(
        fixed_variance=fixed_variance,
        inner=cfg.inner.with_(fixed_log_var=COLLAPSED_LOG_VAR),
        inner_test=cfg.inner_test.with_(fixed_log_var=COLLAPSED_LOG_VAR),
    )


@dataclass
class MetaGradient:
    grad: PriorGrad
    lam_tr: Optional[DiagGaussian] = None
    lam_trval: Optional[DiagGaussian] = None
    elbo_tr: list = field(default_factory=list)
    elbo_trval: list = field(default_factory=list)


class VIEngine:
    """Default inner loop: stochastic ELBO ascent with :func:`vi_fit`."""

    def __init__(self, model):
        self.model = model

    def __call__(self, prior, init, data, cfg, seed) -> VIResult:
        return vi_fit(prior, init, self.model, data, cfg, seed)


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _require_fixed(theta: MetaParams):
    if theta.fixed_variance is None:
        raise ConfigError("this method needs a fixed-variance prior (MetaParams.fixed_variance)")


def _freeze(g: PriorGrad, theta: MetaParams) -> PriorGrad:
    if theta.fixed_variance is None:
        return g
    return PriorGrad(g.d_mean, np.zeros(g.dim))


def _posteriors(theta: MetaParams, task: SplitTask, cfg: MetaConfig, engine, seed):
    """lambda_tr = VI(Theta, D_tr) and lambda_trval per ``cfg.second_call``."""
    prior = theta.theta
    s_tr, s_val = derive_seed(seed, 0), derive_seed(seed, 1)
    tr = engine(prior, prior, task.train, cfg.inner, s_tr)
    if cfg.second_call == "pooled":
        tv = engine(prior, prior, task.pooled, cfg.inner, s_val)
    elif len(task.val) == 0:
        tv = VIResult(tr.lam, [])
    else:
        tv = engine(tr.lam, tr.lam, task.val, cfg.inner, s_val)
    return tr, tv


def gem_bml_gradient(theta: MetaParams, task: SplitTask, cfg: MetaConfig, model=None, seed=0, engine=None) -> MetaGradient:
    """Prior score averaged under the posterior after all task data."""
    if task.K == 0:
        raise ValueError("task has no data")
    engine = engine or VIEngine(model)
    tr, tv = _posteriors(theta, task, cfg, engine, seed)
    g = -expected_prior_score(tv.lam, theta.theta)
    return MetaGradient(_freeze(g, theta), tr.lam, tv.lam, tr.elbo_trace, tv.elbo_trace)


def gem_bml_plus_gradient(theta: MetaParams, task: SplitTask, cfg: MetaConfig, model=None, seed=0, engine=None) -> MetaGradient:
    """Difference of prior scores after D_tr + D_val and after D_tr alone."""
    if task.K == 0:
        raise ValueError("task has no data")
    engine = engine or VIEngine(model)
    tr, tv = _posteriors(theta, task, cfg, engine, seed)
    g = expected_prior_score(tr.lam, theta.theta) - expected_prior_score(tv.lam, theta.theta)
    return MetaGradient(_freeze(g, theta), tr.lam, tv.lam, tr.elbo_trace, tv.elbo_trace)


def _point_adapt(model, start, task: SplitTask, cfg: MetaConfig):
    if cfg.second_call == "pooled":
        theta, _ = point_fit(model, start, task.pooled, cfg.inner)
        return theta
    theta, _ = point_fit(model, start, task.train, cfg.inner)
    theta, _ = point_fit(model, theta, task.val, cfg.inner)
    return theta


def reptile_gradient(theta: MetaParams, task: SplitTask, cfg: MetaConfig, model=None, seed=0, engine=None) -> MetaGradient:
    """``(mu_Theta - adapted) / C0^2`` with the adapted point from plain gradient descent.

    The adaptation visits D_tr then D_val, mirroring the two inner calls of
    the Bayesian routines; ``cfg.second_call == "pooled"`` fits the pooled data instead.
    """
    _require_fixed(theta)
    mu = theta.theta.mean
    adapted = _point_adapt(model, mu, task, cfg)
    d = (mu - adapted) / theta.fixed_variance
    lam = DiagGaussian(adapted, np.full(mu.size, COLLAPSED_LOG_VAR))
    return MetaGradient(PriorGrad(d, np.zeros(mu.size)), None, lam)


def pretrain_gradient(theta: MetaParams, task: SplitTask, cfg: MetaConfig, model=None, seed=0, engine=None) -> MetaGradient:
    """NLL gradient at the prior mean on the pooled task data."""
    _require_fixed(theta)
    data = task.pooled
    if len(data) == 0:
        raise ValueError("task has no data")
    _, g = model.nll_and_grad_batch(theta.theta.mean[None, :], data)
    return MetaGradient(PriorGrad(g[0], np.zeros(theta.dim)))


def fomaml_gradient(theta: MetaParams, task: SplitTask, cfg: MetaConfig, model=None, seed=0, engine=None) -> MetaGradient:
    """First-order MAML: NLL gradient on D_val at the point adapted on D_tr."""
    _require_fixed(theta)
    if len(task.val) == 0:
        raise ValueError("fomaml needs validation data")
    adapted, _ = point_fit(model, theta.theta.mean, task.train, cfg.inner)
    _, g = model.nll_and_grad_batch(adapted[None, :], task.val)
    lam = DiagGaussian(adapted, np.full(adapted.size, COLLAPSED_LOG_VAR))
    return MetaGradient(PriorGrad(g[0], np.zeros(theta.dim)), lam, None)


GRADIENTS: dict[str, Callable] = {
    "gem_bml": gem_bml_gradient,
    "gem_bml_plus": gem_bml_plus_gradient,
    "reptile": reptile_gradient,
    "pretrain": pretrain_gradient,
    "fomaml": fomaml_gradient,
}


def meta_gradient(theta: MetaParams, task: SplitTask, cfg: MetaConfig, model=None, seed=0, engine=None) -> MetaGradient:
    return GRADIENTS[cfg.method](theta, task, cfg, model=model, seed=seed, engine=engine)


def init_meta_params(dim: int, cfg: MetaConfig) -> MetaParams:
    """Mean ~ U(-init_scale, init_scale); log-variance at ``cfg.init_log_var`` unless fixed."""
    rng = np.random.default_rng(derive_seed(cfg.seed, 2**31 - 1))
    mean = rng.uniform(-cfg.init_scale, cfg.init_scale, size=dim)
    if cfg.fixed_variance is not None:
        return MetaParams(DiagGaussian(mean, np.full(dim, math.log(cfg.fixed_variance))), cfg.fixed_variance)
    return MetaParams(DiagGaussian(mean, np.full(dim, cfg.init_log_var)))


class _MetaAdam:
    def __init__(self, lr, dim, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


class MetaTrainError(RuntimeError):
    def __init__(self, msg, iteration, task_index):
        super().__init__(msg)
        self.iteration = iteration
        self.task_index = task_index


@dataclass
class MetaTrainResult:
    params: MetaParams
    trajectory: list  # MetaParams after each iteration (only when recorded)
    diagnostics: list  # one dict per (iteration, task)
    skipped: list  # (iteration, task_index, message)


DIAGNOSTIC_COLUMNS = ("iteration", "task_index", "method", "elbo_tr", "elbo_trval", "grad_norm_mean", "grad_norm_logvar")


def _task_job(args):
    """Worker entry point: sample one task and compute its meta-gradient."""
    theta, cfg, model, engine, sampler, it, j = args
    task = sampler(derive_seed(cfg.seed, it, j, 0))
    try:
        mg = meta_gradient(theta, task, cfg, model=model, seed=derive_seed(cfg.seed, it, j, 1), engine=engine)
    except (NumericError, FloatingPointError) as exc:
        return j, None, f"{type(exc).__name__}: {exc}"
    return j, mg, None


def _last(trace):
    return float(trace[-1]) if trace else float("nan")


def meta_train(
    sampler: Callable[[int], SplitTask],
    cfg: MetaConfig,
    model,
    init: Optional[MetaParams] = None,
    engine=None,
    jobs: int = 1,
    record_trajectory: bool = False,
    checkpoint: Optional[Callable[[int, MetaParams], None]] = None,
) -> MetaTrainResult:
    """Run ``cfg.iterations`` outer steps.

    Task ``j`` of iteration ``it`` is sampled and processed with seeds derived
    from ``(cfg.seed, it, j)``, and gradients are summed in task order, so the
    result does not depend on ``jobs``. ``sampler`` must be picklable when
    ``jobs > 1``.
    """
    params = init if init is not None else init_meta_params(model.dim, cfg)
    if cfg.fixed_variance is not None and params.fixed_variance is None:
        params = MetaParams(params.theta, cfg.fixed_variance)
    d = params.dim
    opt = _MetaAdam(cfg.meta_lr, 2 * d) if cfg.meta_optimizer == "adam" else None
    trajectory, diags, skipped = [], [], []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for it in range(cfg.iterations):
            args = [(params, cfg, model, engine, sampler, it, j) for j in range(cfg.meta_batch_size)]
            results = list(pool.map(_task_job, args)) if pool else [_task_job(a) for a in args]
            total = np.zeros(2 * d)
            for j, mg, err in results:
                if err is not None:
                    if not cfg.skip_on_failure:
                        raise MetaTrainError(f"iteration {it}, task {j}: {err}", it, j)
                    skipped.append((it, j, err))
                    continue
                g = mg.grad
                total += g.as_vector()
                diags.append({
                    "iteration": it, "task_index": j, "method": cfg.method,
                    "elbo_tr": _last(mg.elbo_tr), "elbo_trval": _last(mg.elbo_trval),
                    "grad_norm_mean": float(np.linalg.norm(g.d_mean)),
                    "grad_norm_logvar": float(np.linalg.norm(g.d_log_var)),
                })
            step = opt.step(total) if opt is not None else cfg.meta_lr * total
            mean = params.theta.mean - step[:d]
            log_var = params.theta.log_var if params.fixed_variance is not None else params.theta.log_var - step[d:]
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
                raise MetaTrainError(f"non-finite prior after iteration {it}", it, -1)
            params = MetaParams(DiagGaussian(mean, log_var), params.fixed_variance)
            if record_trajectory:
                trajectory.append(params)
            if checkpoint is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                checkpoint(it + 1, params)
    finally:
        if pool is not None:
            pool.shutdown()
    return MetaTrainResult(params, trajectory, diags, skipped)


@dataclass
class MetaTestResult:
    mse: np.ndarray  # (n_tasks, steps + 1)

    @property
    def n_tasks(self) -> int:
        return self.mse.shape[0]

    @property
    def steps(self) -> int:
        return self.mse.shape[1] - 1

    def mean(self) -> np.ndarray:
        return self.mse.mean(axis=0)

    def ci95(self) -> np.ndarray:
        """Half-width of the normal-approximation 95% interval per step."""
        n = self.n_tasks
        if n < 2:
            return np.full(self.steps + 1, np.nan)
        return 1.959964 * self.mse.std(axis=0, ddof=1) / math.sqrt(n)

    def improvement_pvalue(self, later: int, earlier: int = 0) -> float:
        """One-sided paired t-test that step ``later`` has lower MSE than ``earlier``."""
        a, b = self.mse[:, later], self.mse[:, earlier]
        if np.array_equal(a, b):
            return 1.0
        return float(stats.ttest_rel(a, b, alternative="less").pvalue)


def _val_mse(model, params, data: Dataset) -> float:
    r = model.predict(params, data.inputs) - data.targets
    return float(np.mean(r * r))


def _mc_val_mse(model, lam: DiagGaussian, data: Dataset, eps: np.ndarray) -> float:
    preds = np.mean([model.predict(lam.mean + lam.std * e, data.inputs) for e in eps], axis=0)
    r = preds - data.targets
    return float(np.mean(r * r))


def meta_test(
    params: MetaParams,
    tasks: Sequence[SplitTask],
    cfg: MetaConfig,
    model,
    seed: int = 0,
    steps: Optional[int] = None,
    predictor: str = "mean",
    mc_draws: int = 20,
) -> MetaTestResult:
    """Adapt to each task's D_tr and record the D_val MSE after every inner step.

    Bayesian methods run VI and score either the posterior-mean network
    (``predictor="mean"``) or the average prediction over ``mc_draws``
    posterior samples (``"mc"``); delta methods run plain gradient descent
    from the prior mean.
    """
    if predictor not in ("mean", "mc"):
        raise ValueError(f"unknown predictor {predictor!r}")
    icfg = cfg.inner_test if steps is None else cfg.inner_test.with_(steps=steps)
    out = np.empty((len(tasks), icfg.steps + 1))
    for i, task in enumerate(tasks):
        if cfg.method in DELTA_METHODS:
            _, hist = point_fit(model, params.theta.mean, task.train, icfg, record_history=True)
            out[i] = [_val_mse(model, h, task.val) for h in hist]
            continue
        res = vi_fit(params.theta, params.theta, model, task.train, icfg, derive_seed(seed, i), record_history=True)
        if predictor == "mean":
            out[i] = [_val_mse(model, lam.mean, task.val) for lam in res.history]
        else:
            eps = np.random.default_rng(derive_seed(seed, i, 1)).standard_normal((mc_draws, params.dim))
            out[i] = [_mc_val_mse(model, lam, task.val, eps) for lam in res.history]
    return MetaTestResult(out)


class SinusoidSampler:
    """Picklable task sampler bound to one sinusoid setting."""

    def __init__(self, setting: str = "default", K: int = 10, k_split: int = 5):
        self.setting, self.K, self.k_split = setting, K, k_split

    def __call__(self, seed) -> SplitTask:
        from .tasks import sample_sinusoid

        return sample_sinusoid(self.setting, seed, self.K, self.k_split)

    def batch(self, n: int, seed: int) -> list:
        return [self(derive_seed(seed, i)) for i in range(n)]


class ConjugateSampler:
    def __init__(self, family, m: int, k_split: int):
        self.family, self.m, self.k_split = family, m, k_split

    def __call__(self, seed) -> SplitTask:
        from .tasks import sample_conjugate_task

        return sample_conjugate_task(self.family, seed, self.m, self.k_split)[0]
