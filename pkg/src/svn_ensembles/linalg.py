"""Dense helpers and a matrix-free conjugate gradient solver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


class SolverBreakdown(RuntimeError):
    """CG hit a non-finite value or a direction of non-positive curvature.

    ``x`` holds the last finite iterate.
    """

    def __init__(self, message: str, x: np.ndarray, iters: int):
        super().__init__(message)
        self.x = x
        self.iters = iters


@dataclass(frozen=True)
class LinearOperator:
    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "LinearOperator":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        return cls(m.shape[0], lambda v: m @ v)


class CGResult(NamedTuple):
    x: np.ndarray
    residual: float
    iters: int


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: {m.shape} x {v.shape}")
    return m @ v


def conjugate_gradient(
    a: LinearOperator | np.ndarray,
    b: np.ndarray,
    max_iters: int = 50,
    tol: float = 1e-6,
    damping: float = 0.0,
    x0: np.ndarray | None = None,
    indefinite_ok: bool = False,
    reorthogonalize: bool = True,
) -> CGResult:
    """Solve ``(A + damping*I) x = b`` with conjugate gradients.

    Stops once ``||r|| <= tol * ||b||`` or after ``max_iters`` iterations and
    returns the iterate with the smallest residual seen. The reported residual
    is recomputed from the returned iterate.

    By default a direction with ``p'Ap <= 0`` is a breakdown. With
    ``indefinite_ok`` the iteration carries on through negative curvature (the
    recurrence only needs ``p'Ap != 0`` for a symmetric nonsingular operator)
    and breaks down only when ``|p'Ap|`` is negligible against ``||Ap|| ||p||``.

    ``reorthogonalize`` keeps every residual orthogonal to the earlier ones
    (two Gram-Schmidt passes), which restores the finite-termination behaviour
    rounding otherwise destroys. It stores at most ``max_iters + 1`` vectors.
    """
    if isinstance(a, np.ndarray):
        a = LinearOperator.from_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.dim,):
        raise ValueError(f"rhs has shape {b.shape}, operator dim is {a.dim}")

    def op(v):
        out = a(v)
        return out + damping * v if damping else out

    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if b_norm == 0.0 and x0 is None:
        return CGResult(x, 0.0, 0)

    r = b - op(x)
    p = r.copy()
    rs = float(r @ r)
    if not np.isfinite(rs):
        raise SolverBreakdown("non-finite initial residual", x, 0)
    best_x, best_res = x.copy(), np.sqrt(rs)
    threshold = tol * b_norm
    iters = 0
    basis = None
    if reorthogonalize and rs > 0.0:
        basis = np.empty((min(max_iters, a.dim) + 1, a.dim))
        basis[0] = r / np.sqrt(rs)
    while iters < max_iters and best_res > threshold:
        ap = op(p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or not np.all(np.isfinite(ap)):
            raise SolverBreakdown("non-finite operator product", best_x, iters)
        if indefinite_ok:
            if abs(pap) <= 1e-14 * float(np.linalg.norm(ap) * np.linalg.norm(p)):
                raise SolverBreakdown(f"vanishing curvature p'Ap={pap:.3e}", best_x, iters)
        elif pap <= 0.0:
            raise SolverBreakdown(f"non-positive curvature p'Ap={pap:.3e}", best_x, iters)
        step = rs / pap
        x = x + step * p
        r = r - step * ap
        iters += 1
        if basis is not None:
            q = basis[:iters]
            for _ in range(2):
                r = r - q.T @ (q @ r)
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise SolverBreakdown("non-finite residual", best_x, iters)
        res = np.sqrt(rs_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if rs_new == 0.0:
            break
        if basis is not None and iters < basis.shape[0]:
            basis[iters] = r / res
        elif basis is not None:
            # Krylov space exhausted; the next residual cannot be made orthogonal
            break
        p = r + (rs_new / rs) * p
        rs = rs_new

    residual = float(np.linalg.norm(op(best_x) - b))
    return CGResult(best_x, residual, iters)


def weighted_norm_sq(v: np.ndarray, m=None) -> float:
    """``v' M v`` for a matrix, an object with ``hvp``, or ``None`` (identity)."""
    v = np.asarray(v, dtype=np.float64)
    if m is None:
        return float(v @ v)
    if hasattr(m, "hvp"):
        mv = m.hvp(v)
    else:
        mv = matvec(m, v)
    if mv.shape != v.shape:
        raise ValueError(f"dimension mismatch: {mv.shape} vs {v.shape}")
    return float(v @ mv)


def is_psd(m: np.ndarray, rtol: float = 1e-8, probes: int = 64, seed: int = 0) -> bool:
    """PSD check: min eigenvalue (or sampled Rayleigh quotient) >= -rtol*||m||."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = float(np.linalg.norm(m, 2)) if m.size else 0.0
    sym = 0.5 * (m + m.T)
    if m.shape[0] <= 500:
        lo = float(np.linalg.eigvalsh(sym)[0]) if m.size else 0.0
    else:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((probes, m.shape[0]))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        lo = float(np.min(np.einsum("ij,jk,ik->i", z, sym, z)))
    return lo >= -rtol * scale


symmetric_quadratic_form_check = is_psd
