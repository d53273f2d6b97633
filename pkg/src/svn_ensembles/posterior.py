"""Unnormalised log posterior of a network under an isotropic Gaussian prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MlpArchitecture, forward, loglik, sample_grads


@dataclass(frozen=True)
class PriorSpec:
    precision: float = 1.0

    def __post_init__(self):
        if not self.precision >= 0:
            raise ValueError("prior precision must be non-negative")


@dataclass(frozen=True)
class BatchView:
    """A minibatch of ``b`` rows drawn from a dataset of ``dataset_size`` rows."""

    inputs: np.ndarray
    targets: np.ndarray
    dataset_size: int

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.targets)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        if len(y) != x.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {len(y)} targets")
        if self.dataset_size < x.shape[0]:
            raise ValueError("batch larger than dataset")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def scale(self) -> float:
        """``n / b``; makes minibatch sums unbiased for full-data sums."""
        return self.dataset_size / self.size if self.size else 0.0

    @classmethod
    def full(cls, x, y) -> "BatchView":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return cls(x, y, x.shape[0])


def log_likelihood(arch: MlpArchitecture, params: np.ndarray, batch: BatchView) -> float:
    """Sum of per-sample log-likelihoods over the batch (not rescaled)."""
    if batch.size == 0:
        return 0.0
    out = forward(arch, params, batch.inputs)
    return float(np.sum(loglik(arch, out, batch.targets)))


def log_posterior(arch, params, batch: BatchView, prior: PriorSpec) -> float:
    """``(n/b) * loglik - precision * |params|^2 / 2``."""
    params = np.asarray(params, dtype=np.float64)
    return batch.scale * log_likelihood(arch, params, batch) - 0.5 * prior.precision * float(params @ params)


def grad_log_posterior(arch: MlpArchitecture, params: np.ndarray, batch: BatchView, prior: PriorSpec) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    g = -prior.precision * params
    if batch.size:
        g = g + batch.scale * sample_grads(arch, params, batch.inputs, batch.targets).sum(axis=0)
    return g


def hessian_log_posterior_contrib(prior: PriorSpec, dim: int):
    """Curvature contributed by the prior: ``precision * I`` as a diagonal estimate."""
    from .curvature import DiagonalCurvature

    return DiagonalCurvature(np.full(dim, float(prior.precision)))
