"""Variational inner update: fit a diagonal-Gaussian task posterior by ELBO ascent.

The expected log-likelihood is estimated with reparameterised Monte Carlo
draws; the KL term against the prior is always analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._validation import ConfigError, NumericError
from .gaussian import DiagGaussian, kl, kl_grad_q
from .nn import ArchSpec, Dataset, MLPLikelihood


@dataclass(frozen=True)
class VIConfig:
    steps: int = 10
    learning_rate: float = 0.001
    mc_samples: int = 5
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: Optional[float] = None
    # when set, the posterior log-variance is pinned to this value (delta regime)
    fixed_log_var: Optional[float] = None

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 0:
            raise ConfigError(f"steps must be a non-negative integer, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when set")

    def with_(self, **kw) -> "VIConfig":
        return replace(self, **kw)


@dataclass
class VIResult:
    lam: DiagGaussian
    elbo_trace: list[float]
    history: Optional[list[DiagGaussian]] = field(default=None, repr=False)


def as_model(model, noise_var: float = 1.0):
    """Accept either a likelihood object or an ArchSpec."""
    if isinstance(model, ArchSpec):
        return MLPLikelihood(model, noise_var)
    return model


def _expected_loglik(model, lam: DiagGaussian, data: Dataset, eps: np.ndarray):
    """Monte Carlo log-likelihood and its gradient w.r.t. (mean, log_var)."""
    if len(data) == 0:
        d = lam.dim
        return 0.0, np.zeros(d), np.zeros(d)
    std = lam.std
    theta = lam.mean + std * eps
    nll, g = model.nll_and_grad_batch(theta, data)
    S = eps.shape[0]
    ll = -float(np.mean(nll))
    d_mean = -g.sum(axis=0) / S
    d_log_var = -(g * eps).sum(axis=0) * (0.5 * std) / S
    return ll, d_mean, d_log_var


def elbo_estimate(lam: DiagGaussian, prior: DiagGaussian, model, data: Dataset, eps_draws, noise_var: float = 1.0) -> float:
    """``mean_s log p(D | mean + std*eps_s) - KL(lam || prior)``."""
    model = as_model(model, noise_var)
    eps = np.atleast_2d(np.asarray(eps_draws, dtype=np.float64))
    if eps.shape[0] == 0 or eps.size == 0:
        raise ValueError("at least one eps draw is required")
    if eps.shape[1] != lam.dim:
        raise ValueError("eps draws do not match the posterior dimension")
    ll, _, _ = _expected_loglik(model, lam, data, eps)
    return ll - kl(lam, prior)


class _Adam:
    def __init__(self, cfg: VIConfig, dim: int):
        self.cfg = cfg
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, g):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        return c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps)


def _clip(g, clip_norm):
    if clip_norm is None:
        return g
    n = np.linalg.norm(g)
    return g * (clip_norm / n) if n > clip_norm else g


def vi_fit(
    prior: DiagGaussian,
    init: Optional[DiagGaussian],
    model,
    data: Dataset,
    cfg: VIConfig,
    rng_seed,
    noise_var: float = 1.0,
    record_history: bool = False,
) -> VIResult:
    """Stochastic-gradient ELBO ascent starting from ``init`` (defaults to the prior).

    Returns the final posterior and the per-step ELBO estimates, each taken
    with that step's draws before the update is applied.
    """
    model = as_model(model, noise_var)
    if init is None:
        init = prior
    if init.dim != prior.dim or prior.dim != model.dim:
        raise ValueError("prior, init and model dimensions disagree")
    d = prior.dim
    rng = np.random.default_rng(rng_seed)
    mean = init.mean.copy()
    log_var = init.log_var.copy()
    frozen = cfg.fixed_log_var is not None
    if frozen:
        log_var[:] = cfg.fixed_log_var
    adam = _Adam(cfg, 2 * d) if cfg.optimizer == "adam" else None

    trace = []
    history = [DiagGaussian(mean, log_var)] if record_history else None
    # overflow is detected and reported below, so numpy's warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.steps):
            lam = DiagGaussian(mean, log_var)
            eps = rng.standard_normal((cfg.mc_samples, d))
            ll, g_mean, g_lv = _expected_loglik(model, lam, data, eps)
            kg = kl_grad_q(lam, prior)
            value = ll - kl(lam, prior)
            if not np.isfinite(value):
                raise NumericError(f"non-finite ELBO at step {step}", step=step)
            trace.append(value)
            g = np.concatenate([g_mean - kg.d_mean, g_lv - kg.d_log_var])
            if frozen:
                g[d:] = 0.0
            g = _clip(g, cfg.clip_norm)
            delta = adam.step(g) if adam is not None else cfg.learning_rate * g
            mean = mean + delta[:d]
            log_var = log_var + delta[d:]
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
                raise NumericError(f"non-finite posterior parameters after step {step}", step=step)
            if record_history:
                history.append(DiagGaussian(mean, log_var))
    return VIResult(DiagGaussian(mean, log_var), trace, history)


def point_fit(model, start, data: Dataset, cfg: VIConfig, record_history: bool = False):
    """Plain gradient descent on the NLL from ``start``; the delta-posterior inner loop.

    Returns ``(final_params, history)`` where history holds every iterate
    (including the start) when requested.
    """
    theta = np.array(start, dtype=np.float64)
    history = [theta.copy()] if record_history else None
    adam = _Adam(cfg, theta.size) if cfg.optimizer == "adam" else None
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.steps):
            if len(data) == 0:
                g = np.zeros_like(theta)
            else:
                _, g = model.nll_and_grad_batch(theta[None, :], data)
                g = _clip(g[0], cfg.clip_norm)
            theta = theta - (adam.step(g) if adam is not None else cfg.learning_rate * g)
            if not np.all(np.isfinite(theta)):
                raise NumericError(f"non-finite parameters after step {step}", step=step)
            if record_history:
                history.append(theta.copy())
    return theta, history
