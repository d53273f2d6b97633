"""Gaussian kernels between particles under an identity or curvature metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ._backend import kernels as _k
from .curvature import CurvatureEstimate, mean_curvature


class IdentityMetric:
    kind = "identity"

    def hvp(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64)

    def __repr__(self):
        return "IdentityMetric()"


@dataclass(frozen=True)
class CurvatureMetric:
    """Averaged curvature acting on coordinates ``offset:``; identity before that.

    ``offset`` is non-zero only for the last-layer variant, where the metric is
    built from last-layer curvatures alone.
    """

    estimate: CurvatureEstimate
    offset: int = 0
    kind = "avg_curvature"

    def hvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return np.concatenate([v[: self.offset], self.estimate.hvp(v[self.offset :])])


MetricOperator = IdentityMetric | CurvatureMetric


def average_curvature(estimates: Sequence[CurvatureEstimate], offset: int = 0) -> CurvatureMetric:
    return CurvatureMetric(mean_curvature(estimates), offset)


def dimension_scale(dim: int) -> float:
    """Exponent factor ``1 / (2d)`` of the anisotropic kernel."""
    return 1.0 / (2.0 * dim)


def kernel_eval(m: MetricOperator, a: np.ndarray, b: np.ndarray, scale: float | None = None) -> float:
    """``exp(-scale * (a-b)' M (a-b))`` with ``scale = 1/(2d)`` by default."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    scale = dimension_scale(a.shape[0]) if scale is None else scale
    diff = a - b
    sq = max(float(diff @ m.hvp(diff)), 0.0)
    return float(np.exp(-scale * sq))


def kernel_grad(m: MetricOperator, a: np.ndarray, b: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Gradient of ``kernel_eval`` in its first argument."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = dimension_scale(a.shape[0]) if scale is None else scale
    return -2.0 * scale * kernel_eval(m, a, b, scale) * m.hvp(a - b)


class KernelState(NamedTuple):
    """``values[i, j] = k(phi_i, phi_j)``, ``grads[i, j] = grad_{phi_i} k(phi_i, phi_j)``."""

    values: np.ndarray
    grads: np.ndarray
    scale: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def restrict(self, offset: int, stop: int) -> "KernelState":
        """Same kernel values, gradients cut to coordinates ``offset:stop``."""
        return KernelState(self.values, np.ascontiguousarray(self.grads[:, :, offset:stop]), self.scale)


def median_scale(particles: np.ndarray, mphi: np.ndarray) -> float | None:
    """``log N / median squared distance``; ``None`` when undefined."""
    n = particles.shape[0]
    if n < 2:
        return None
    iu = np.triu_indices(n, 1)
    diff = particles[:, None, :] - particles[None, :, :]
    diff_m = mphi[:, None, :] - mphi[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff_m)[iu]
    med = float(np.median(np.maximum(sq, 0.0)))
    if med <= 0.0:
        return None
    return np.log(n) / med


def build_kernel_state(m: MetricOperator, particles: np.ndarray, bandwidth: str = "dimension") -> KernelState:
    """Kernel values and gradients for every ordered particle pair.

    ``bandwidth`` is ``"dimension"`` (exponent factor ``1/(2d)``) or ``"median"``
    (the usual SVGD median heuristic, falling back to ``1/(2d)`` when it is
    undefined).
    """
    particles = np.ascontiguousarray(np.atleast_2d(particles), dtype=np.float64)
    d = particles.shape[1]
    mphi = np.ascontiguousarray(np.stack([m.hvp(p) for p in particles]))
    scale = dimension_scale(d)
    if bandwidth == "median":
        scale = median_scale(particles, mphi) or scale
    elif bandwidth != "dimension":
        raise ValueError(f"unknown bandwidth mode {bandwidth!r}")
    values, grads = _k.kernel_state(particles, mphi, scale)
    return KernelState(np.asarray(values), np.asarray(grads), scale)
