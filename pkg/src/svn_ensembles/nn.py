"""Fully-connected networks on flat parameter vectors.

Parameters are stored per layer as ``(weights row-major (out x in), biases)``.
Gradients and output Jacobians are computed by an explicit batched backward
pass; no autodiff framework is involved.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

HEADS = ("gaussian_regression", "homoscedastic_regression", "binary_classification", "multiclass")
ACTIVATIONS = ("tanh", "relu")

# lower clamp on the predicted variance of the gaussian head
VAR_EPS = 1e-6
LOG_VAR_EPS = float(np.log(VAR_EPS))


class PoisonedParametersError(FloatingPointError):
    """Raised when a forward pass produces non-finite values."""


class LayerSlice(NamedTuple):
    layer_index: int
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    def of(self, v: np.ndarray) -> np.ndarray:
        return v[..., self.offset : self.stop]


@dataclass(frozen=True)
class MlpArchitecture:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    head: str = "gaussian_regression"
    # only used by the homoscedastic head
    noise_var: float = 1.0
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) <= 0:
            raise ValueError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        k = sizes[-1]
        expected = {"gaussian_regression": 2, "homoscedastic_regression": 1, "binary_classification": 1}
        if self.head in expected and k != expected[self.head]:
            raise ValueError(f"head {self.head} needs {expected[self.head]} outputs, got {k}")
        if self.head == "multiclass" and k < 2:
            raise ValueError("multiclass head needs at least 2 outputs")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")
        object.__setattr__(self, "_shapes", tuple(zip(sizes[1:], sizes[:-1])))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self._shapes)

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self._shapes)

    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """``(out, in)`` per layer."""
        return self._shapes

    def layer_slices(self) -> list[LayerSlice]:
        out, offset = [], 0
        for idx, (o, i) in enumerate(self._shapes):
            out.append(LayerSlice(idx, offset, o * i + o))
            offset += o * i + o
        return out

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "head": self.head,
            "noise_var": self.noise_var,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        return cls(
            tuple(d["layer_sizes"]),
            d.get("activation", "tanh"),
            d.get("head", "gaussian_regression"),
            float(d.get("noise_var", 1.0)),
        )


def last_layer_slice(arch: MlpArchitecture) -> LayerSlice:
    return arch.layer_slices()[-1]


def unflatten(arch: MlpArchitecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got shape {params.shape}")
    layers, offset = [], 0
    for o, i in arch.layer_shapes():
        w = params[offset : offset + o * i].reshape(o, i)
        offset += o * i
        b = params[offset : offset + o]
        offset += o
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def init_params(arch: MlpArchitecture, seed: int | np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    parts = []
    for o, i in arch.layer_shapes():
        bound = np.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-bound, bound, size=o * i))
        parts.append(np.zeros(o))
    return np.concatenate(parts)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_deriv(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0.0).astype(np.float64)


class _Trace(NamedTuple):
    out: np.ndarray
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    layers: list


def _trace(arch, params, x) -> _Trace:
    layers = unflatten(arch, params)
    h = np.asarray(x, dtype=np.float64)
    inputs, pre = [], []
    for idx, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = _act(arch.activation, z) if idx < len(layers) - 1 else z
    if not np.all(np.isfinite(h)):
        raise PoisonedParametersError("non-finite network output")
    return _Trace(h, inputs, pre, layers)


def _as_batch(arch, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != arch.n_inputs:
        raise ValueError(f"expected inputs with {arch.n_inputs} features, got {x.shape}")
    return x, single


def forward(arch: MlpArchitecture, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Network outputs for one input vector (k,) or a batch (b, k)."""
    xb, single = _as_batch(arch, x)
    out = _trace(arch, params, xb).out
    return out[0] if single else out


def _backward(arch, tr: _Trace, seed: np.ndarray, keep_deltas: bool = False):
    """Pull ``seed`` (b, r, k) back through the net; returns (b, r, d).

    With ``keep_deltas`` the per-layer pre-activation sensitivities (b, r, out_l)
    are returned as well.
    """
    b, r, _ = seed.shape
    delta = seed
    blocks = [None] * len(tr.layers)
    deltas = [None] * len(tr.layers)
    for idx in range(len(tr.layers) - 1, -1, -1):
        w, _ = tr.layers[idx]
        a_in = tr.inputs[idx]
        gw = delta[:, :, :, None] * a_in[:, None, None, :]
        blocks[idx] = np.concatenate([gw.reshape(b, r, -1), delta], axis=2)
        if keep_deltas:
            deltas[idx] = delta
        if idx > 0:
            z = tr.pre[idx - 1]
            a = tr.inputs[idx]
            delta = (delta @ w) * _act_deriv(arch.activation, z, a)[:, None, :]
    full = np.concatenate(blocks, axis=2)
    return (full, deltas) if keep_deltas else full


def output_jacobian(arch: MlpArchitecture, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched output Jacobians d g(x_i) / d params, shape (b, k, d)."""
    xb, _ = _as_batch(arch, x)
    tr = _trace(arch, params, xb)
    seed = np.broadcast_to(np.eye(arch.n_outputs), (xb.shape[0], arch.n_outputs, arch.n_outputs))
    return _backward(arch, tr, seed)


def per_sample_output_jacobian(arch, params, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single input vector")
    return output_jacobian(arch, params, x[None, :])[0]


# -- likelihood heads -------------------------------------------------------


def _targets(arch, y, b):
    y = np.asarray(y)
    if arch.head == "multiclass":
        return y.reshape(b).astype(np.int64)
    return y.reshape(b).astype(np.float64)


def loglik(arch: MlpArchitecture, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample log-likelihood of targets under network outputs (b, k).

    Gaussian constants are omitted.
    """
    out = np.atleast_2d(out)
    y = _targets(arch, y, out.shape[0])
    head = arch.head
    if head == "gaussian_regression":
        log_var = np.maximum(out[:, 1], LOG_VAR_EPS)
        # diverged parameters give inf/nan here; callers reject non-finite steps
        with np.errstate(over="ignore", invalid="ignore"):
            return -0.5 * (log_var + (y - out[:, 0]) ** 2 * np.exp(-log_var))
    if head == "homoscedastic_regression":
        var = arch.noise_var
        return -0.5 * (np.log(var) + (y - out[:, 0]) ** 2 / var)
    if head == "binary_classification":
        z = out[:, 0]
        return y * z - np.logaddexp(0.0, z)
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return logp[np.arange(len(y)), y]


def loglik_output_grad(arch: MlpArchitecture, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d loglik / d outputs, shape (b, k)."""
    out = np.atleast_2d(out)
    y = _targets(arch, y, out.shape[0])
    head = arch.head
    if head == "gaussian_regression":
        log_var = np.maximum(out[:, 1], LOG_VAR_EPS)
        prec = np.exp(-log_var)
        r = y - out[:, 0]
        ds = np.where(out[:, 1] > LOG_VAR_EPS, -0.5 * (1.0 - r * r * prec), 0.0)
        return np.stack([r * prec, ds], axis=1)
    if head == "homoscedastic_regression":
        return ((y - out[:, 0]) / arch.noise_var)[:, None]
    if head == "binary_classification":
        return (y - _sigmoid(out[:, 0]))[:, None]
    p = softmax(out)
    p[np.arange(len(y)), y] -= 1.0
    return -p


def output_fisher(arch: MlpArchitecture, out: np.ndarray) -> np.ndarray:
    """Output-space curvature of the negative log-likelihood, (b, k, k).

    This is the Fisher information of the likelihood in output coordinates,
    which is what the GGN uses; for the Gaussian head with a log-variance
    output it is ``diag(1/var, 1/2)``.
    """
    out = np.atleast_2d(out)
    b, k = out.shape
    head = arch.head
    lam = np.zeros((b, k, k))
    if head == "gaussian_regression":
        lam[:, 0, 0] = np.exp(-np.maximum(out[:, 1], LOG_VAR_EPS))
        lam[:, 1, 1] = np.where(out[:, 1] > LOG_VAR_EPS, 0.5, 0.0)
    elif head == "homoscedastic_regression":
        lam[:, 0, 0] = 1.0 / arch.noise_var
    elif head == "binary_classification":
        p = _sigmoid(out[:, 0])
        lam[:, 0, 0] = p * (1.0 - p)
    else:
        p = softmax(out)
        lam = -p[:, :, None] * p[:, None, :]
        lam[:, np.arange(k), np.arange(k)] += p
    return lam


def sample_targets(arch: MlpArchitecture, out: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw targets from the model's predictive distribution."""
    out = np.atleast_2d(out)
    head = arch.head
    if head == "gaussian_regression":
        std = np.exp(0.5 * np.maximum(out[:, 1], LOG_VAR_EPS))
        return out[:, 0] + std * rng.standard_normal(out.shape[0])
    if head == "homoscedastic_regression":
        return out[:, 0] + np.sqrt(arch.noise_var) * rng.standard_normal(out.shape[0])
    if head == "binary_classification":
        return (rng.random(out.shape[0]) < _sigmoid(out[:, 0])).astype(np.float64)
    p = softmax(out)
    u = rng.random((out.shape[0], 1))
    return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), out.shape[1] - 1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sample_grads(arch: MlpArchitecture, params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample gradients of the log-likelihood, shape (b, d)."""
    xb, _ = _as_batch(arch, x)
    tr = _trace(arch, params, xb)
    seed = loglik_output_grad(arch, tr.out, y)[:, None, :]
    return _backward(arch, tr, seed)[:, 0, :]


def per_sample_grad(arch: MlpArchitecture, params: np.ndarray, x: np.ndarray, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sample_grads(arch, params, x[None, :], np.atleast_1d(y))[0]


# -- checkpoints ------------------------------------------------------------


def _fmt_row(row) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in row) + "]"


def save_checkpoint(path, arch: MlpArchitecture, particles: np.ndarray, seed: int | None = None) -> None:
    """Write particles as 17-significant-digit decimals; round-trips exactly."""
    particles = np.atleast_2d(particles)
    head = json.dumps({"architecture": arch.to_dict(), "seed": seed}, sort_keys=True)[:-1]
    rows = ",\n  ".join(_fmt_row(p) for p in particles)
    text = f'{head}, "particles": [\n  {rows}\n]}}\n'
    atomic_write_text(path, text)


def load_checkpoint(path) -> tuple[MlpArchitecture, np.ndarray, int | None]:
    with open(path) as fh:
        doc = json.load(fh)
    arch = MlpArchitecture.from_dict(doc["architecture"])
    particles = np.array(doc["particles"], dtype=np.float64).reshape(-1, arch.n_params)
    return arch, particles, doc.get("seed")


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
