"""Numpy implementations of the hot kernels (fallback for ``_core``)."""

import numpy as np


def kernel_state(phi, mphi, scale):
    """Gaussian kernel values and first-argument gradients for all pairs.

    ``mphi[i] = M phi_i``. Returns ``values[i, j] = k(phi_i, phi_j)`` and
    ``grads[i, j] = grad_{phi_i} k(phi_i, phi_j)``.
    """
    diff_m = mphi[:, None, :] - mphi[None, :, :]
    diff = phi[:, None, :] - phi[None, :, :]
    sq = np.maximum(np.einsum("ijd,ijd->ij", diff, diff_m), 0.0)
    values = np.exp(-scale * sq)
    grads = (-2.0 * scale) * values[:, :, None] * diff_m
    return values, grads


def svgd_direction(kvals, kgrads, grads):
    n = kvals.shape[0]
    return (kvals.T @ grads + kgrads.sum(axis=0)) / n


def repulsion_matvec(kgrads, alpha):
    n = kgrads.shape[0]
    dots = np.einsum("pme,ne->pmn", kgrads, alpha)
    return np.einsum("pmn,pnd->md", dots, kgrads) / n


def svn_matvec_dense(kvals, kgrads, hess, alpha):
    n = kvals.shape[0]
    u = kvals @ alpha
    w = np.einsum("pde,pe->pd", hess, u)
    return kvals.T @ w / n + repulsion_matvec(kgrads, alpha)


def svn_matvec_diag(kvals, kgrads, diag, alpha):
    n = kvals.shape[0]
    w = diag * (kvals @ alpha)
    return kvals.T @ w / n + repulsion_matvec(kgrads, alpha)
