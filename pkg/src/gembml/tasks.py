"""Seeded few-shot task generators: sinusoid regression and conjugate linear tasks.

Every generator is a pure function of its seed. Points are generated first
and split afterwards by index prefix, so two splits of the same task share
their leading training points.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import Dataset

# (amplitude range, phase range, frequency range, relative noise std)
SINUSOID_SETTINGS = {
    "default": ((0.1, 5.0), (0.0, math.pi), (1.0, 1.0), 0.0),
    "challenging": ((0.1, 5.0), (0.0, 2 * math.pi), (0.5, 2.0), 0.01),
    "easy": ((0.1, 5.0), (0.0, 2 * math.pi), (0.5, 1.0), 0.0),
}
X_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SinusoidParams:
    amplitude: float
    phase: float
    frequency: float
    noise_std: float

    def __call__(self, x):
        return self.amplitude * np.sin(self.frequency * np.asarray(x) + self.phase)


@dataclass(frozen=True)
class SplitTask:
    train: Dataset
    val: Dataset
    generator: str = ""
    seed: Optional[int] = None
    params: dict = field(default_factory=dict)

    @property
    def pooled(self) -> Dataset:
        return self.train.concat(self.val)

    @property
    def K(self) -> int:
        return len(self.train) + len(self.val)


def _split(x, y, k_split, **meta) -> SplitTask:
    return SplitTask(Dataset(x[:k_split], y[:k_split]), Dataset(x[k_split:], y[k_split:]), **meta)


def sample_sinusoid(setting: str, rng_seed, K: int = 10, k_split: int = 5) -> SplitTask:
    """Draw one sinusoid task ``y = A sin(w x + b) + eps`` with K points, the first k_split for training."""
    if setting not in SINUSOID_SETTINGS:
        raise ValueError(f"unknown sinusoid setting {setting!r}; expected one of {sorted(SINUSOID_SETTINGS)}")
    if K < 1 or not 0 <= k_split <= K:
        raise ValueError(f"need K >= 1 and 0 <= k_split <= K, got K={K}, k_split={k_split}")
    (a_lo, a_hi), (b_lo, b_hi), (w_lo, w_hi), rel_noise = SINUSOID_SETTINGS[setting]
    rng = np.random.default_rng(rng_seed)
    A = rng.uniform(a_lo, a_hi)
    b = rng.uniform(b_lo, b_hi)
    w = rng.uniform(w_lo, w_hi) if w_hi > w_lo else w_lo
    p = SinusoidParams(A, b, w, rel_noise * A)
    x = rng.uniform(*X_RANGE, size=(K, 1))
    y = p(x)
    if p.noise_std > 0:
        y = y + p.noise_std * rng.standard_normal((K, 1))
    meta = {"amplitude": A, "phase": b, "frequency": w, "noise_std": p.noise_std}
    return _split(x, y, k_split, generator=f"sinusoid-{setting}", seed=_seed_repr(rng_seed), params=meta)


def _seed_repr(seed):
    return seed if isinstance(seed, (int, np.integer)) else None


@dataclass(frozen=True)
class ConjugateTaskFamily:
    """Tasks ``y = X theta + noise`` with ``theta ~ N(prior_mean, diag(prior_var))``.

    ``design`` is ``"ones"`` (every row all ones) or ``"gaussian"`` (iid N(0,1) rows).
    """

    p: int = 1
    prior_mean: tuple = (0.0,)
    prior_var: tuple = (1.0,)
    noise_var: float = 1.0
    design: str = "ones"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be at least 1")
        pm = np.broadcast_to(np.asarray(self.prior_mean, dtype=np.float64), (self.p,))
        pv = np.broadcast_to(np.asarray(self.prior_var, dtype=np.float64), (self.p,))
        if np.any(pv <= 0) or not self.noise_var > 0:
            raise ValueError("variances must be positive")
        if self.design not in ("ones", "gaussian"):
            raise ValueError(f"unknown design {self.design!r}")
        object.__setattr__(self, "prior_mean", tuple(pm.tolist()))
        object.__setattr__(self, "prior_var", tuple(pv.tolist()))

    def design_matrix(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if self.design == "ones":
            return np.ones((m, self.p))
        return rng.standard_normal((m, self.p))


def sample_conjugate_task(family: ConjugateTaskFamily, rng_seed, m: int, k_split: int):
    """Returns ``(SplitTask, theta)``; theta is for diagnostics only."""
    if m < 1 or not 0 <= k_split <= m:
        raise ValueError(f"need m >= 1 and 0 <= k_split <= m, got m={m}, k_split={k_split}")
    rng = np.random.default_rng(rng_seed)
    theta = np.asarray(family.prior_mean) + np.sqrt(family.prior_var) * rng.standard_normal(family.p)
    X = family.design_matrix(rng, m)
    y = X @ theta + math.sqrt(family.noise_var) * rng.standard_normal(m)
    task = _split(X, y[:, None], k_split, generator="conjugate", seed=_seed_repr(rng_seed), params={"theta": theta.tolist()})
    return task, theta


def write_task_csv(task: SplitTask, path) -> None:
    """Rows of (x..., y..., split) with a header."""
    n_in = task.train.inputs.shape[1]
    n_out = task.train.targets.shape[1]
    header = [f"x{i}" for i in range(n_in)] + [f"y{i}" for i in range(n_out)] + ["split"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for tag, ds in (("train", task.train), ("val", task.val)):
            for x, y in zip(ds.inputs, ds.targets):
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y] + [tag])
