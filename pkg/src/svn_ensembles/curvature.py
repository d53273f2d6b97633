"""PSD curvature of the negative log posterior: full GGN, diagonal, KFAC.

All estimates approximate ``-hess log pi`` (positive curvature) and include the
prior precision. Batch sums are rescaled by ``n / b`` like the posterior
gradient.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import (
    LayerSlice,
    MlpArchitecture,
    _backward,
    _trace,
    atomic_write_text,
    loglik_output_grad,
    output_fisher,
    output_jacobian,
    sample_targets,
)
from .posterior import BatchView


class CurvatureTooLarge(ValueError):
    """A dense estimate was requested for too many parameters."""


@dataclass(frozen=True)
class FullCurvature:
    matrix: np.ndarray
    kind = "full"

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def hvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: {v.shape} vs {self.dim}")
        return self.matrix @ v

    def to_dense(self) -> np.ndarray:
        return self.matrix.copy()


@dataclass(frozen=True)
class DiagonalCurvature:
    diag: np.ndarray
    kind = "diagonal"

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    def hvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: {v.shape} vs {self.dim}")
        return self.diag * v

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag)


@dataclass(frozen=True)
class KroneckerBlock:
    """One layer's ``Q (out x out) kron K ((in+1) x (in+1))`` block.

    ``perm[j]`` is the layer-local position of entry ``j`` of the row-major
    ``out x (in+1)`` matrix ``[W | b]``.
    """

    offset: int
    q: np.ndarray
    k: np.ndarray
    perm: np.ndarray

    @property
    def length(self) -> int:
        return self.perm.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        # row-major vec trick: (Q kron K) vec(X) = vec(Q X K^T)
        xm = x[self.perm].reshape(self.q.shape[0], self.k.shape[0])
        y = np.empty_like(x)
        y[self.perm] = (self.q @ xm @ self.k.T).ravel()
        return y

    def to_dense(self) -> np.ndarray:
        out = np.empty((self.length, self.length))
        out[np.ix_(self.perm, self.perm)] = np.kron(self.q, self.k)
        return out


@dataclass(frozen=True)
class KroneckerCurvature:
    blocks: tuple[KroneckerBlock, ...]
    dim: int
    kind = "kfac"

    def hvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: {v.shape} vs {self.dim}")
        out = np.zeros_like(v)
        for blk in self.blocks:
            sl = slice(blk.offset, blk.offset + blk.length)
            out[sl] = blk.matvec(v[sl])
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for blk in self.blocks:
            sl = slice(blk.offset, blk.offset + blk.length)
            out[sl, sl] = blk.to_dense()
        return out


CurvatureEstimate = FullCurvature | DiagonalCurvature | KroneckerCurvature


def hvp(estimate: CurvatureEstimate, v: np.ndarray) -> np.ndarray:
    return estimate.hvp(v)


def _check_dim(arch, cap, dim=None):
    d = arch.n_params if dim is None else dim
    if d > cap:
        raise CurvatureTooLarge(
            f"dense curvature for d={d} exceeds cap {cap}; use the diagonal or kfac variant"
        )


def _restricted_jacobian(arch, params, batch, param_slice):
    jac = output_jacobian(arch, params, batch.inputs)
    if param_slice is not None:
        jac = jac[:, :, param_slice.offset : param_slice.stop]
    return jac


def ggn_full(
    arch: MlpArchitecture,
    params: np.ndarray,
    batch: BatchView,
    prior_precision: float = 0.0,
    param_slice: LayerSlice | None = None,
    max_dim: int = 5000,
) -> FullCurvature:
    """``(n/b) sum_i J_i' L_i J_i + precision*I``."""
    d = arch.n_params if param_slice is None else param_slice.length
    _check_dim(arch, max_dim, d)
    g = np.zeros((d, d))
    if batch.size:
        jac = _restricted_jacobian(arch, params, batch, param_slice)
        lam = output_fisher(arch, _trace(arch, params, batch.inputs).out)
        lj = np.einsum("bkl,bld->bkd", lam, jac)
        g = batch.scale * (jac.reshape(-1, d).T @ lj.reshape(-1, d))
        g = 0.5 * (g + g.T)
    g[np.diag_indices(d)] += prior_precision
    return FullCurvature(g)


def fisher_full_mc(
    arch: MlpArchitecture,
    params: np.ndarray,
    batch: BatchView,
    prior_precision: float = 0.0,
    samples: int = 1,
    seed: int = 0,
    max_dim: int = 5000,
) -> FullCurvature:
    """Monte-Carlo Fisher with targets drawn from the model."""
    d = arch.n_params
    _check_dim(arch, max_dim)
    f = np.zeros((d, d))
    if samples > 0 and batch.size:
        rng = np.random.default_rng(seed)
        tr = _trace(arch, params, batch.inputs)
        jac = output_jacobian(arch, params, batch.inputs)
        for _ in range(samples):
            y = sample_targets(arch, tr.out, rng)
            g = np.einsum("bk,bkd->bd", loglik_output_grad(arch, tr.out, y), jac)
            f += g.T @ g
        f *= batch.scale / samples
    f[np.diag_indices(d)] += prior_precision
    return FullCurvature(f)


def curvature_diagonal(
    arch: MlpArchitecture,
    params: np.ndarray,
    batch: BatchView,
    prior_precision: float = 0.0,
    param_slice: LayerSlice | None = None,
) -> DiagonalCurvature:
    """Exact diagonal of the GGN plus the prior precision."""
    d = arch.n_params if param_slice is None else param_slice.length
    diag = np.zeros(d)
    if batch.size:
        jac = _restricted_jacobian(arch, params, batch, param_slice)
        lam = output_fisher(arch, _trace(arch, params, batch.inputs).out)
        diag = batch.scale * np.einsum("bkd,bkl,bld->d", jac, lam, jac)
    return DiagonalCurvature(diag + prior_precision)


def _block_perm(out_dim: int, in_dim: int) -> np.ndarray:
    # position of [W | b][o, i] inside the layer's (W row-major, b) layout
    perm = np.empty((out_dim, in_dim + 1), dtype=np.int64)
    perm[:, :in_dim] = np.arange(out_dim * in_dim).reshape(out_dim, in_dim)
    perm[:, in_dim] = out_dim * in_dim + np.arange(out_dim)
    return perm.ravel()


def curvature_kfac(
    arch: MlpArchitecture,
    params: np.ndarray,
    batch: BatchView,
    prior_precision: float = 0.0,
    layers: Sequence[int] | None = None,
) -> KroneckerCurvature:
    """Per-layer KFAC of the GGN.

    ``Q_l = (n/b) sum_i D_i' L_i D_i`` with ``D_i`` the output Jacobian with
    respect to the layer's pre-activations, ``K_l = mean_i [a_i,1][a_i,1]'``.
    The prior is split as ``sqrt(precision)`` on both factors. When ``layers``
    is given the estimate covers only those layers, concatenated in order.
    """
    slices = arch.layer_slices()
    chosen = list(range(arch.n_layers)) if layers is None else list(layers)
    shapes = arch.layer_shapes()
    damp = np.sqrt(prior_precision)
    b = batch.size
    if b:
        tr = _trace(arch, params, batch.inputs)
        lam = output_fisher(arch, tr.out)
        k = arch.n_outputs
        seed = np.broadcast_to(np.eye(k), (b, k, k))
        _, deltas = _backward(arch, tr, seed, keep_deltas=True)
    blocks, offset = [], 0
    for idx in chosen:
        out_dim, in_dim = shapes[idx]
        if b:
            dl = deltas[idx]
            q = batch.scale * np.einsum("bko,bkl,blp->op", dl, lam, dl)
            a = np.concatenate([tr.inputs[idx], np.ones((b, 1))], axis=1)
            kf = a.T @ a / b
        else:
            q = np.zeros((out_dim, out_dim))
            kf = np.zeros((in_dim + 1, in_dim + 1))
        q = 0.5 * (q + q.T) + damp * np.eye(out_dim)
        kf = 0.5 * (kf + kf.T) + damp * np.eye(in_dim + 1)
        blocks.append(KroneckerBlock(offset, q, kf, _block_perm(out_dim, in_dim)))
        offset += slices[idx].length
    return KroneckerCurvature(tuple(blocks), offset)


def estimate_curvature(
    kind: str,
    arch: MlpArchitecture,
    params: np.ndarray,
    batch: BatchView,
    prior_precision: float,
    param_slice: LayerSlice | None = None,
    max_dim: int = 5000,
) -> CurvatureEstimate:
    """Dispatch on ``kind``; ``param_slice`` must be a whole layer for kfac."""
    if kind == "full":
        return ggn_full(arch, params, batch, prior_precision, param_slice, max_dim)
    if kind == "diagonal":
        return curvature_diagonal(arch, params, batch, prior_precision, param_slice)
    if kind == "kfac":
        layers = None if param_slice is None else [param_slice.layer_index]
        return curvature_kfac(arch, params, batch, prior_precision, layers)
    raise ValueError(f"unknown curvature kind {kind!r}")


def mean_curvature(estimates: Sequence[CurvatureEstimate]) -> CurvatureEstimate:
    """Elementwise mean (factor-wise for KFAC)."""
    if not estimates:
        raise ValueError("no estimates to average")
    first = estimates[0]
    if any(type(e) is not type(first) or e.dim != first.dim for e in estimates):
        raise TypeError("cannot average curvature estimates of mixed variants or sizes")
    if isinstance(first, FullCurvature):
        return FullCurvature(np.mean([e.matrix for e in estimates], axis=0))
    if isinstance(first, DiagonalCurvature):
        return DiagonalCurvature(np.mean([e.diag for e in estimates], axis=0))
    blocks = []
    for j, blk in enumerate(first.blocks):
        q = np.mean([e.blocks[j].q for e in estimates], axis=0)
        k = np.mean([e.blocks[j].k for e in estimates], axis=0)
        blocks.append(KroneckerBlock(blk.offset, q, k, blk.perm))
    return KroneckerCurvature(tuple(blocks), first.dim)


def dump_curvature(estimate: CurvatureEstimate, path) -> None:
    """Write the materialised matrix as CSV (no header)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in estimate.to_dense():
        writer.writerow([format(v, ".17g") for v in row])
    atomic_write_text(path, buf.getvalue())
