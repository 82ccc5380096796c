"""Diagonal Gaussians over flat parameter vectors.

Variances are stored as log-variances so unconstrained gradient steps can
never produce a non-positive variance. Prior gradients are always taken
with respect to ``(mean, log_var)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_float_vector, check_same_dim

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        m = as_float_vector(self.mean, name="mean")
        lv = as_float_vector(self.log_var, name="log_var")
        if lv.shape[0] == 1 and m.shape[0] > 1:
            lv = np.full_like(m, lv[0])
        check_same_dim(m, lv, names=("mean", "log_var"))
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(lv))):
            raise ValueError("DiagGaussian entries must be finite")
        m = m.copy()
        lv = lv.copy()
        m.flags.writeable = False
        lv.flags.writeable = False
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "log_var", lv)

    @classmethod
    def from_var(cls, mean, var) -> "DiagGaussian":
        return cls(mean, np.log(np.asarray(var, dtype=np.float64)))

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def replace(self, mean=None, log_var=None) -> "DiagGaussian":
        return DiagGaussian(self.mean if mean is None else mean, self.log_var if log_var is None else log_var)

    def allclose(self, other: "DiagGaussian", atol=0.0, rtol=0.0) -> bool:
        return bool(
            np.allclose(self.mean, other.mean, atol=atol, rtol=rtol)
            and np.allclose(self.log_var, other.log_var, atol=atol, rtol=rtol)
        )

    def __eq__(self, other):
        if not isinstance(other, DiagGaussian):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.log_var, other.log_var)

    __hash__ = None

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "log_var": self.log_var.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DiagGaussian":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["log_var"], dtype=np.float64))

    def __repr__(self):
        return f"DiagGaussian(dim={self.dim}, mean={_short(self.mean)}, log_var={_short(self.log_var)})"


def _short(a, n=4):
    body = ", ".join(f"{v:.4g}" for v in a[:n])
    return f"[{body}{', ...' if a.size > n else ''}]"


@dataclass(frozen=True, eq=False)
class PriorGrad:
    """Gradient with respect to a DiagGaussian's (mean, log_var)."""

    d_mean: np.ndarray
    d_log_var: np.ndarray

    def __post_init__(self):
        dm = as_float_vector(self.d_mean, name="d_mean")
        dl = as_float_vector(self.d_log_var, name="d_log_var")
        check_same_dim(dm, dl, names=("d_mean", "d_log_var"))
        object.__setattr__(self, "d_mean", dm)
        object.__setattr__(self, "d_log_var", dl)

    @classmethod
    def zeros(cls, dim: int) -> "PriorGrad":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.d_mean.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_mean, self.d_log_var])

    def __add__(self, other: "PriorGrad") -> "PriorGrad":
        return PriorGrad(self.d_mean + other.d_mean, self.d_log_var + other.d_log_var)

    def __sub__(self, other: "PriorGrad") -> "PriorGrad":
        return PriorGrad(self.d_mean - other.d_mean, self.d_log_var - other.d_log_var)

    def __neg__(self) -> "PriorGrad":
        return PriorGrad(-self.d_mean, -self.d_log_var)

    def __mul__(self, c: float) -> "PriorGrad":
        return PriorGrad(c * self.d_mean, c * self.d_log_var)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, PriorGrad):
            return NotImplemented
        return np.array_equal(self.d_mean, other.d_mean) and np.array_equal(self.d_log_var, other.d_log_var)

    __hash__ = None


def _pair(q: DiagGaussian, p: DiagGaussian):
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")


def log_pdf(q: DiagGaussian, theta) -> float:
    theta = as_float_vector(theta, q.dim, "theta")
    z2 = (theta - q.mean) ** 2 * np.exp(-q.log_var)
    return float(np.sum(-0.5 * LOG_2PI - 0.5 * q.log_var - 0.5 * z2))


def sample(q: DiagGaussian, eps) -> np.ndarray:
    """Reparameterised draw ``mean + std * eps``; ``eps`` may be ``(d,)`` or ``(S, d)``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != q.dim or eps.ndim > 2:
        raise ValueError(f"eps of shape {eps.shape} does not match dimension {q.dim}")
    return q.mean + q.std * eps


def kl(q: DiagGaussian, p: DiagGaussian) -> float:
    """KL(q || p) in closed form."""
    _pair(q, p)
    return float(kl_terms(q.mean, q.log_var, p.mean, p.log_var).sum())


def kl_terms(mq, lq, mp, lp) -> np.ndarray:
    return 0.5 * (np.exp(lq - lp) + (mp - mq) ** 2 * np.exp(-lp) - 1.0 + lp - lq)


def kl_grad_q(q: DiagGaussian, p: DiagGaussian) -> PriorGrad:
    """Gradient of KL(q || p) with respect to q's (mean, log_var)."""
    _pair(q, p)
    inv_vp = np.exp(-p.log_var)
    return PriorGrad((q.mean - p.mean) * inv_vp, 0.5 * (np.exp(q.log_var) * inv_vp - 1.0))


def expected_prior_score(posterior: DiagGaussian, prior: DiagGaussian) -> PriorGrad:
    """``E_{theta ~ posterior} grad_prior log N(theta; prior)`` in closed form.

    Equal to the gradient of ``-KL(posterior || prior)`` with respect to the
    prior, because the posterior entropy does not depend on the prior.
    """
    _pair(posterior, prior)
    inv_vp = np.exp(-prior.log_var)
    diff = posterior.mean - prior.mean
    # expm1 of the log-variance gap keeps the score exactly zero at posterior == prior
    return PriorGrad(diff * inv_vp, 0.5 * (np.expm1(posterior.log_var - prior.log_var) + diff * diff * inv_vp))


def score_from_moments(mean, var, prior: DiagGaussian) -> PriorGrad:
    """Expected prior score under any law with the given per-coordinate mean and variance."""
    inv_vp = np.exp(-prior.log_var)
    diff = np.asarray(mean, dtype=np.float64) - prior.mean
    return PriorGrad(diff * inv_vp, 0.5 * ((np.asarray(var, dtype=np.float64) + diff * diff) * inv_vp - 1.0))


def delta_limit_score(posterior_mean, prior: DiagGaussian) -> PriorGrad:
    """Prior-mean score when the posterior collapses to a point; log-variance part discarded."""
    posterior_mean = as_float_vector(posterior_mean, prior.dim, "posterior_mean")
    return PriorGrad((posterior_mean - prior.mean) * np.exp(-prior.log_var), np.zeros(prior.dim))


def score_samples(theta: np.ndarray, prior: DiagGaussian) -> np.ndarray:
    """Per-sample prior score ``(S, 2d)`` for Monte Carlo checks."""
    theta = np.atleast_2d(theta)
    inv_vp = np.exp(-prior.log_var)
    diff = theta - prior.mean
    return np.hstack([diff * inv_vp, 0.5 * (diff * diff * inv_vp - 1.0)])
