"""Run configuration: a flat, typed ``key = value`` file plus overrides.

Grammar, one entry per line::

    # comment
    seed = 0
    meta.method = gem_bml_plus
    arch.layer_sizes = 1, 40, 40, 1
    inner.clip_norm = none

Dotted prefixes act as sections. Every key must be known; its type is the
type of the default value. Lists are comma separated, ``none`` clears an
optional value and booleans are ``true`` / ``false``.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Optional

from ._validation import ConfigError
from .meta import DELTA_METHODS, MetaConfig
from .nn import ArchSpec
from .vi import VIConfig

_OPT_FLOAT = "optional-float"

# key -> (default, type); type is one of int, float, str, bool, "ints", _OPT_FLOAT
SCHEMA: dict = {
    "experiment": ("sine", str),
    "seed": (0, int),
    "jobs": (1, int),
    "noise_var": (1.0, float),
    "arch.layer_sizes": ((1, 40, 40, 1), "ints"),
    "arch.activation": ("relu", str),
    "task.setting": ("default", str),
    "task.K": (10, int),
    "task.k_split": (5, int),
    "meta.method": ("gem_bml_plus", str),
    "meta.meta_lr": (0.001, float),
    "meta.meta_batch_size": (5, int),
    "meta.iterations": (20000, int),
    "meta.meta_optimizer": ("adam", str),
    "meta.second_call": ("sequential", str),
    "meta.fixed_variance": (None, _OPT_FLOAT),
    "meta.learn_variance": (False, bool),
    "meta.init_scale": (0.05, float),
    "meta.init_log_var": (-4.0, float),
    "meta.skip_on_failure": (False, bool),
    "meta.checkpoint_every": (1000, int),
    "test.n_tasks": (600, int),
    "test.control": (True, bool),
    "grad_error.n_problems": (100, int),
    "grad_error.p": (2, int),
    "grad_error.m": (10, int),
    "grad_error.lr": (0.1, float),
    "grad_error.steps": ((1, 2, 5, 10, 50, 200), "ints"),
    "variance_ratio.k": (5, int),
    "variance_ratio.m": (10, int),
    "variance_ratio.n_tasks": (500, int),
    "variance_ratio.n_replicates": (500, int),
    "variance_ratio.prior_var": (1e-3, float),
    "pinsker.n_problems": (1000, int),
    "pinsker.per_problem": (10, int),
    "pinsker.mean_scale": (0.1, float),
    "pinsker.log_var_scale": (0.1, float),
    "l2_check.n_splits": (1000, int),
    "predictive.n_tasks": (10000, int),
    "predictive.shift": (0.5, float),
    "predictive.inflate": (4.0, float),
    "neighborhood.checkpoint": ("", str),
    "neighborhood.n_anchors": (10, int),
    "neighborhood.n_combinations": (100, int),
    "neighborhood.n_tasks": (100, int),
    "neighborhood.factor": (2.0, float),
    "gradcheck.inject_fault": ("", str),
}

for _prefix, _steps in (("inner", 1), ("inner_test", 10)):
    SCHEMA.update({
        f"{_prefix}.steps": (_steps, int),
        f"{_prefix}.learning_rate": (0.001, float),
        f"{_prefix}.mc_samples": (5, int),
        f"{_prefix}.optimizer": ("sgd", str),
        f"{_prefix}.beta1": (0.9, float),
        f"{_prefix}.beta2": (0.999, float),
        f"{_prefix}.adam_eps": (1e-8, float),
        f"{_prefix}.clip_norm": (None, _OPT_FLOAT),
        f"{_prefix}.fixed_log_var": (None, _OPT_FLOAT),
    })


def _parse(key: str, text: str):
    default, kind = SCHEMA[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == _OPT_FLOAT:
            return None if text.lower() == "none" else float(text)
        if kind == "ints":
            return tuple(int(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def defaults() -> dict:
    return {k: v for k, (v, _) in SCHEMA.items()}


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _parse(key, value)
    return out


def load(path: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = defaults()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg.update(parse_lines(fh, path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg.update(parse_lines(overrides, "--set"))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg["task.setting"] not in ("default", "challenging", "easy"):
        raise ConfigError(f"unknown task.setting {cfg['task.setting']!r}")
    if not 0 <= cfg["task.k_split"] <= cfg["task.K"]:
        raise ConfigError("need 0 <= task.k_split <= task.K")
    if not cfg["noise_var"] > 0 or not math.isfinite(cfg["noise_var"]):
        raise ConfigError("noise_var must be positive")
    try:
        arch(cfg)
        meta_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dumps(cfg: dict) -> str:
    return "".join(f"{k} = {_format(cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()[:16]


def arch(cfg: dict) -> ArchSpec:
    return ArchSpec(cfg["arch.layer_sizes"], cfg["arch.activation"])


def vi_config(cfg: dict, prefix: str) -> VIConfig:
    fields = ("steps", "learning_rate", "mc_samples", "optimizer", "beta1", "beta2", "adam_eps", "clip_norm", "fixed_log_var")
    return VIConfig(**{f: cfg[f"{prefix}.{f}"] for f in fields})


def meta_config(cfg: dict) -> MetaConfig:
    fixed = cfg["meta.fixed_variance"]
    if cfg["meta.method"] in DELTA_METHODS and fixed is None:
        # point-estimate methods need a prior scale; unit variance is the neutral choice
        fixed = 1.0
    elif fixed is None and not cfg["meta.learn_variance"]:
        # hold the prior variance at its initial value and learn only the mean
        fixed = math.exp(cfg["meta.init_log_var"])
    return MetaConfig(
        method=cfg["meta.method"],
        meta_lr=cfg["meta.meta_lr"],
        meta_batch_size=cfg["meta.meta_batch_size"],
        iterations=cfg["meta.iterations"],
        inner=vi_config(cfg, "inner"),
        inner_test=vi_config(cfg, "inner_test"),
        seed=cfg["seed"],
        meta_optimizer=cfg["meta.meta_optimizer"],
        second_call=cfg["meta.second_call"],
        fixed_variance=fixed,
        init_scale=cfg["meta.init_scale"],
        init_log_var=cfg["meta.init_log_var"],
        skip_on_failure=cfg["meta.skip_on_failure"],
        checkpoint_every=cfg["meta.checkpoint_every"],
    )
