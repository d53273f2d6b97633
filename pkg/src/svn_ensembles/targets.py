"""Log-density targets the particle updates can run against."""

from __future__ import annotations

import numpy as np

from .curvature import (
    CurvatureEstimate,
    DiagonalCurvature,
    FullCurvature,
    estimate_curvature,
)
from .nn import LayerSlice, MlpArchitecture, PoisonedParametersError
from .posterior import BatchView, PriorSpec, grad_log_posterior, log_likelihood


class NetworkPosterior:
    """Minibatch posterior of an MLP; the target of every network method."""

    def __init__(self, arch: MlpArchitecture, batch: BatchView, prior: PriorSpec, max_dim: int = 5000):
        self.arch = arch
        self.batch = batch
        self.prior = prior
        self.max_dim = max_dim

    @property
    def dim(self) -> int:
        return self.arch.n_params

    def grad(self, phi: np.ndarray) -> np.ndarray:
        return grad_log_posterior(self.arch, phi, self.batch, self.prior)

    def curvature(self, phi: np.ndarray, kind: str, param_slice: LayerSlice | None = None) -> CurvatureEstimate:
        return estimate_curvature(
            kind, self.arch, phi, self.batch, self.prior.precision, param_slice, self.max_dim
        )

    def mean_nll(self, phi: np.ndarray) -> float:
        if not self.batch.size:
            return 0.0
        return -log_likelihood(self.arch, phi, self.batch) / self.batch.size

    def is_finite(self, phi: np.ndarray) -> bool:
        if not np.all(np.isfinite(phi)):
            return False
        if not self.batch.size:
            return True
        try:
            return bool(np.isfinite(log_likelihood(self.arch, phi, self.batch)))
        except PoisonedParametersError:
            return False


class GaussianPosterior:
    """``N(mean, precision^{-1})`` with exact curvature."""

    def __init__(self, mean, precision):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.precision = np.asarray(precision, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def grad(self, phi: np.ndarray) -> np.ndarray:
        return -self.precision @ (np.asarray(phi) - self.mean)

    def curvature(self, phi, kind: str, param_slice: LayerSlice | None = None) -> CurvatureEstimate:
        p = self.precision
        if param_slice is not None:
            p = p[param_slice.offset : param_slice.stop, param_slice.offset : param_slice.stop]
        if kind == "full":
            return FullCurvature(p.copy())
        if kind == "diagonal":
            return DiagonalCurvature(np.diag(p).copy())
        raise ValueError(f"curvature kind {kind!r} is not available for a Gaussian target")

    def mean_nll(self, phi) -> float:
        diff = np.asarray(phi) - self.mean
        return 0.5 * float(diff @ self.precision @ diff)

    def is_finite(self, phi) -> bool:
        return bool(np.all(np.isfinite(phi)))
