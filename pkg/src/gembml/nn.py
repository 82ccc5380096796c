"""Small fixed-architecture MLPs: forward pass and first-order gradients.

Parameters live in one flat float64 vector. Per layer the layout is the
weight matrix (shape ``(n_out, n_in)``, row-major) followed by the bias,
layers in order. All gradient code is hand-written reverse accumulation
and is vectorised over a leading batch of parameter vectors, which is how
the Monte Carlo draws of the variational inner loop are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._validation import NumericError, as_float_vector

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class ArchSpec:
    """Feedforward MLP description; the activation applies to hidden layers only."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("an architecture needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return parameter_count(self)

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}


def parameter_count(arch: ArchSpec) -> int:
    s = arch.layer_sizes
    return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))


def _slices(arch: ArchSpec):
    """Yield (weight slice, bias slice, n_in, n_out) per layer."""
    offset = 0
    s = arch.layer_sizes
    for n_in, n_out in zip(s[:-1], s[1:]):
        w = slice(offset, offset + n_in * n_out)
        offset += n_in * n_out
        b = slice(offset, offset + n_out)
        offset += n_out
        yield w, b, n_in, n_out


def unpack(arch: ArchSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into ``[(W, b), ...]`` (views, not copies)."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got shape {params.shape}")
    return [(params[w].reshape(n_out, n_in), params[b]) for w, b, n_in, n_out in _slices(arch)]


def pack(arch: ArchSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`unpack`."""
    if len(layers) != len(arch.layer_sizes) - 1:
        raise ValueError("layer count does not match the architecture")
    out = np.empty(arch.n_params)
    for (W, b), (ws, bs, n_in, n_out) in zip(layers, _slices(arch)):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.shape != (n_out, n_in) or b.shape != (n_out,):
            raise ValueError(f"layer shapes {W.shape}, {b.shape} do not match ({n_out}, {n_in})")
        out[ws] = W.ravel()
        out[bs] = b
    return out


def init_params(arch: ArchSpec, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    """Uniform(-scale, scale) initialisation of every coordinate."""
    return rng.uniform(-scale, scale, size=arch.n_params)


@dataclass(frozen=True)
class Dataset:
    """K input/target rows; ``inputs`` is ``(K, n_in)``, ``targets`` is ``(K, n_out)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {x.shape} and {y.shape}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def K(self) -> int:
        return self.inputs.shape[0]

    def concat(self, other: "Dataset") -> "Dataset":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Dataset(np.vstack([self.inputs, other.inputs]), np.vstack([self.targets, other.targets]))

    def take(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx])

    @classmethod
    def empty(cls, n_in: int = 1, n_out: int = 1) -> "Dataset":
        return cls(np.zeros((0, n_in)), np.zeros((0, n_out)))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        # subgradient 0 at z == 0
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _check_inputs(arch: ArchSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and arch.n_in == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != arch.n_in:
        raise ValueError(f"inputs of shape {X.shape} do not match n_in={arch.n_in}")
    return X


def _forward_batch(arch: ArchSpec, P: np.ndarray, X: np.ndarray, keep: bool = False):
    """Evaluate S parameter vectors on K inputs. Returns ``(S, K, n_out)``.

    With ``keep`` the pre-activations and activations are returned for backprop.
    """
    S = P.shape[0]
    h = np.broadcast_to(X, (S,) + X.shape)
    cache = [(None, h)]
    layers = list(_slices(arch))
    for i, (ws, bs, n_in, n_out) in enumerate(layers):
        W = P[:, ws].reshape(S, n_out, n_in)
        z = np.einsum("ski,soi->sko", h, W) + P[:, None, bs]
        h = z if i == len(layers) - 1 else _act(arch.activation, z)
        if keep:
            cache.append((z, h))
    return (h, cache) if keep else h


def forward(arch: ArchSpec, params, x) -> np.ndarray:
    """Network output vector for a single input vector ``x``."""
    params = as_float_vector(params, arch.n_params, "params")
    x = as_float_vector(x, arch.n_in, "x")
    return _forward_batch(arch, params[None, :], x[None, :])[0, 0]


def predict(arch: ArchSpec, params, X) -> np.ndarray:
    """Outputs for a ``(K, n_in)`` input matrix, shape ``(K, n_out)``."""
    params = as_float_vector(params, arch.n_params, "params")
    return _forward_batch(arch, params[None, :], _check_inputs(arch, X))[0]


def nll_and_grad_batch(arch: ArchSpec, P: np.ndarray, data: Dataset, noise_var: float):
    """Gaussian negative log-likelihood and its gradient for S parameter vectors.

    Returns ``(nll, grad)`` with shapes ``(S,)`` and ``(S, d)``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if P.shape[1] != arch.n_params:
        raise ValueError(f"expected {arch.n_params} parameters, got {P.shape[1]}")
    if data.K == 0:
        raise ValueError("nll of an empty dataset is undefined here")
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    X = _check_inputs(arch, data.inputs)
    if data.targets.shape[1] != arch.n_out:
        raise ValueError("target width does not match n_out")
    S = P.shape[0]
    out, cache = _forward_batch(arch, P, X, keep=True)
    r = out - data.targets[None]
    n_obs = r.shape[1] * r.shape[2]
    nll = 0.5 * np.einsum("sko,sko->s", r, r) / noise_var + 0.5 * n_obs * math.log(2 * math.pi * noise_var)

    grad = np.empty_like(P)
    delta = r / noise_var
    layers = list(_slices(arch))
    for i in range(len(layers) - 1, -1, -1):
        ws, bs, n_in, n_out = layers[i]
        h_prev = cache[i][1]
        grad[:, ws] = np.einsum("sko,ski->soi", delta, h_prev).reshape(S, -1)
        grad[:, bs] = delta.sum(axis=1)
        if i > 0:
            W = P[:, ws].reshape(S, n_out, n_in)
            z_prev, a_prev = cache[i]
            delta = np.einsum("sko,soi->ski", delta, W) * _act_grad(arch.activation, z_prev, a_prev)
    return nll, grad


def nll_and_grad(arch: ArchSpec, params, data: Dataset, noise_var: float = 1.0):
    """Gaussian NLL ``sum ||y - f(x)||^2 / (2 s2) + (K n_out / 2) log(2 pi s2)`` and its gradient."""
    params = as_float_vector(params, arch.n_params, "params")
    nll, grad = nll_and_grad_batch(arch, params[None, :], data, noise_var)
    return float(nll[0]), grad[0]


def mse(arch: ArchSpec, params, data: Dataset) -> float:
    r = predict(arch, params, data.inputs) - data.targets
    return float(np.mean(r * r))


def finite_diff_grad(f: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    theta = np.array(params, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        old = theta.flat[i]
        theta.flat[i] = old + eps
        up = f(theta)
        theta.flat[i] = old - eps
        down = f(theta)
        theta.flat[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        g.flat[i] = (up - down) / (2 * eps)
    return g


class MLPLikelihood:
    """Gaussian likelihood of an MLP regressor with fixed observation noise.

    This is the object the inference and meta-learning code talks to; any
    class exposing ``dim``, ``nll_and_grad_batch(P, data)`` and
    ``predict(params, X)`` can stand in for it.
    """

    def __init__(self, arch: ArchSpec, noise_var: float = 1.0):
        if not noise_var > 0:
            raise ValueError("noise_var must be positive")
        self.arch = arch
        self.noise_var = float(noise_var)

    @property
    def dim(self) -> int:
        return self.arch.n_params

    def nll_and_grad_batch(self, P, data: Dataset):
        return nll_and_grad_batch(self.arch, P, data, self.noise_var)

    def predict(self, params, X) -> np.ndarray:
        return predict(self.arch, params, X)

    def __repr__(self):
        return f"MLPLikelihood({self.arch!r}, noise_var={self.noise_var})"
