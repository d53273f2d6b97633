"""Ensemble predictive summaries and evaluation metrics."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .nn import VAR_EPS, forward, softmax


class RegressionSummary(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    member_means: np.ndarray  # (N, n)
    member_vars: np.ndarray  # (N, n)


def _member_outputs(ensemble, x):
    return np.stack([forward(ensemble.arch, p, x) for p in ensemble.particles])


def member_moments(ensemble, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-member predictive means and variances, each (N, n)."""
    out = _member_outputs(ensemble, np.atleast_2d(x))
    arch = ensemble.arch
    if arch.head == "gaussian_regression":
        with np.errstate(over="ignore"):
            return out[:, :, 0], np.maximum(np.exp(out[:, :, 1]), VAR_EPS)
    if arch.head == "homoscedastic_regression":
        return out[:, :, 0], np.full(out.shape[:2], arch.noise_var)
    raise ValueError(f"head {arch.head} is not a regression head")


def mixture_moments(means: np.ndarray, variances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of the equal-weight Gaussian mixture over axis 0."""
    mean = means.mean(axis=0)
    var = (variances + means**2).mean(axis=0) - mean**2
    return mean, np.sqrt(np.maximum(var, 0.0))


def predictive_regression(ensemble, x) -> RegressionSummary:
    mu, var = member_moments(ensemble, x)
    mean, std = mixture_moments(mu, var)
    return RegressionSummary(mean, std, mu, var)


def gaussian_nll(mean, var, y) -> np.ndarray:
    """Per-point ``0.5 * (log v + (y - mean)^2 / v)``, ``v = max(var, 1e-6)``."""
    v = np.maximum(np.asarray(var, dtype=np.float64), VAR_EPS)
    return 0.5 * (np.log(v) + (np.asarray(y) - mean) ** 2 / v)


def nll_regression(summary: RegressionSummary, targets, mixture: bool = False) -> float:
    """Mean test NLL from the mixture's first two moments.

    With ``mixture=True`` the exact equal-weight mixture likelihood is used
    instead (same constant convention).
    """
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if not mixture:
        return float(np.mean(gaussian_nll(summary.mean, summary.std**2, y)))
    v = np.maximum(summary.member_vars, VAR_EPS)
    logp = -0.5 * (np.log(v) + (y - summary.member_means) ** 2 / v)
    n = logp.shape[0]
    top = logp.max(axis=0)
    lse = top + np.log(np.exp(logp - top).sum(axis=0)) - np.log(n)
    return float(-np.mean(lse))


def averaged_logits(ensemble, x) -> np.ndarray:
    return _member_outputs(ensemble, np.atleast_2d(x)).mean(axis=0)


def class_probs(logits: np.ndarray, head: str) -> np.ndarray:
    """Probabilities (n, C); binary logits give two columns ``(1-p, p)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if head == "binary_classification" or logits.ndim == 1 or logits.shape[1] == 1:
        z = logits.reshape(-1)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.stack([1.0 - p, p], axis=1)
    return softmax(logits)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean cross-entropy of unnormalised logits; a single column is a binary logit."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if logits.ndim == 1 or logits.shape[1] == 1:
        z = logits.reshape(-1)
        return float(np.mean(np.logaddexp(0.0, z) - labels * z))
    top = logits.max(axis=1, keepdims=True)
    lse = (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def nll_classification(ensemble, x, y) -> float:
    """Cross-entropy of the ensemble-averaged logits."""
    return cross_entropy(averaged_logits(ensemble, x), y)


def accuracy(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def mse(pred, targets) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    return float(np.mean((pred - np.asarray(targets, dtype=np.float64).reshape(-1)) ** 2))


def ece(probs, labels, bins: int = 10) -> float:
    """Expected calibration error of the top-class confidence, equal-width bins."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    # bins are (lo, hi]; confidence 0 lands in the first bin
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        if mask.any():
            total += mask.mean() * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def brier(probs, labels) -> float:
    """Mean over points of the squared error summed over classes."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # average ranks over ties
    _, starts, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    for s, c in zip(starts, counts):
        ranks[order[s : s + c]] = s + (c + 1) / 2.0
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def validation_nll(ensemble, data) -> float:
    """NLL on the validation split in the model's (standardised) target space."""
    if data.x_val.shape[0] == 0:
        return float("nan")
    if data.task == "regression":
        return nll_regression(predictive_regression(ensemble, data.x_val), data.y_val)
    return nll_classification(ensemble, data.x_val, data.y_val)


def evaluate(ensemble, data, ece_bins: int = 10, mixture_nll: bool = False) -> dict:
    """Test-split metrics; regression reports standardised and original units."""
    x, y = data.x_test, data.y_test
    if data.task == "regression":
        s = predictive_regression(ensemble, x)
        out = {
            "nll": nll_regression(s, y, mixture=mixture_nll),
            "mse": mse(s.mean, y),
        }
        if data.y_scaler is not None:
            mean_o, std_o = data.y_scaler.inverse_moments(s.mean, s.std)
            y_o = data.y_scaler.inverse(y)
            out["nll_original"] = float(np.mean(gaussian_nll(mean_o, std_o**2, y_o)))
            out["mse_original"] = mse(mean_o, y_o)
        return out
    logits = averaged_logits(ensemble, x)
    probs = class_probs(logits, ensemble.arch.head)
    out = {
        "nll": cross_entropy(logits, y),
        "accuracy": accuracy(probs, y),
        "ece": ece(probs, y, ece_bins),
        "brier": brier(probs, y),
    }
    if probs.shape[1] == 2:
        out["auroc"] = auroc(probs[:, 1], y)
    return out
