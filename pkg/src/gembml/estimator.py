"""scikit-learn style wrapper around the meta-learning loop.

``fit`` consumes a task sampler (or a list of tasks) instead of a single
design matrix, ``adapt`` runs the test-time inner loop on one task's
support data and ``predict`` evaluates the adapted posterior mean.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence, Union

from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .meta import DELTA_METHODS, MetaConfig, derive_seed, init_meta_params, meta_train
from .nn import ArchSpec, Dataset, MLPLikelihood
from .tasks import SplitTask
from .vi import VIConfig, point_fit, vi_fit


class _ListSampler:
    def __init__(self, tasks):
        self.tasks = list(tasks)

    def __call__(self, seed):
        return self.tasks[int(seed) % len(self.tasks)]


class BayesianMetaRegressor(RegressorMixin, BaseEstimator):
    """Meta-learned diagonal-Gaussian prior over MLP weights."""

    def __init__(
        self,
        layer_sizes=(1, 40, 40, 1),
        activation="relu",
        method="gem_bml_plus",
        meta_lr=0.001,
        meta_batch_size=5,
        iterations=1000,
        inner_steps=1,
        inner_lr=0.001,
        test_steps=10,
        mc_samples=5,
        noise_var=1.0,
        fixed_variance=None,
        learn_variance=False,
        meta_optimizer="adam",
        init_log_var=-4.0,
        random_state=0,
    ):
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.method = method
        self.meta_lr = meta_lr
        self.meta_batch_size = meta_batch_size
        self.iterations = iterations
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr
        self.test_steps = test_steps
        self.mc_samples = mc_samples
        self.noise_var = noise_var
        self.fixed_variance = fixed_variance
        self.learn_variance = learn_variance
        self.meta_optimizer = meta_optimizer
        self.init_log_var = init_log_var
        self.random_state = random_state

    def _config(self) -> MetaConfig:
        fixed = self.fixed_variance
        if self.method in DELTA_METHODS and fixed is None:
            fixed = 1.0
        elif fixed is None and not self.learn_variance:
            fixed = math.exp(self.init_log_var)
        return MetaConfig(
            method=self.method,
            meta_lr=self.meta_lr,
            meta_batch_size=self.meta_batch_size,
            iterations=self.iterations,
            inner=VIConfig(steps=self.inner_steps, learning_rate=self.inner_lr, mc_samples=self.mc_samples),
            inner_test=VIConfig(steps=self.test_steps, learning_rate=self.inner_lr, mc_samples=self.mc_samples),
            seed=int(self.random_state),
            meta_optimizer=self.meta_optimizer,
            fixed_variance=fixed,
            init_log_var=self.init_log_var,
        )

    def fit(self, tasks: Union[Callable[[int], SplitTask], Sequence[SplitTask]], y=None):
        """Meta-train on ``tasks``: a seeded sampler ``seed -> SplitTask`` or a list of tasks."""
        cfg = self._config()
        sampler = tasks if callable(tasks) else _ListSampler(tasks)
        self.arch_ = ArchSpec(tuple(self.layer_sizes), self.activation)
        self.model_ = MLPLikelihood(self.arch_, self.noise_var)
        self.config_ = cfg
        result = meta_train(sampler, cfg, self.model_, init=init_meta_params(self.model_.dim, cfg))
        self.prior_ = result.params
        self.posterior_mean_ = self.prior_.theta.mean.copy()
        self.n_features_in_ = self.arch_.n_in
        self.n_adapt_ = 0
        return self

    def adapt(self, X, y):
        """Run the test-time inner loop on one task's support set."""
        check_is_fitted(self, "prior_")
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._check_width(X)
        data = Dataset(X, y)
        cfg = self.config_
        if cfg.method in DELTA_METHODS:
            self.posterior_mean_, _ = point_fit(self.model_, self.prior_.theta.mean, data, cfg.inner_test)
        else:
            seed = derive_seed(cfg.seed, 2**41, self.n_adapt_)
            self.posterior_mean_ = vi_fit(self.prior_.theta, self.prior_.theta, self.model_, data, cfg.inner_test, seed).lam.mean
        self.n_adapt_ += 1
        return self

    def reset(self):
        """Forget the last adaptation; predictions come from the prior mean again."""
        check_is_fitted(self, "prior_")
        self.posterior_mean_ = self.prior_.theta.mean.copy()
        return self

    def predict(self, X):
        check_is_fitted(self, "prior_")
        X = check_array(X)
        self._check_width(X)
        out = self.model_.predict(self.posterior_mean_, X)
        return out[:, 0] if out.shape[1] == 1 else out

    def _check_width(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
