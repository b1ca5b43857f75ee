"""Penalty-objective terms on a batch prediction matrix.

Each term returns ``(value, gradient)`` where the gradient is taken with
respect to the ``B x K`` prediction matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 1e-12
DEFAULT_WEIGHTS = (0.3, 1.0, 0.5)


class SVDError(RuntimeError):
    pass


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def soft_cross_entropy(preds: np.ndarray, labels: np.ndarray):
    """Mean over rows of ``-sum_k labels[i,k] * log(preds[i,k])``."""
    _check_pair(preds, labels)
    B = preds.shape[0]
    p = np.maximum(preds, LOG_CLAMP)
    value = -np.sum(labels * np.log(p)) / B
    grad = np.where(preds > LOG_CLAMP, -labels / (B * p), 0.0)
    return float(value), grad


def neg_nuclear_norm(preds: np.ndarray):
    """Negative sum of singular values; gradient is ``-U @ V.T``."""
    if preds.ndim != 2 or min(preds.shape) < 1:
        raise ValueError("prediction matrix must be 2-D and nonempty")
    try:
        U, s, Vt = np.linalg.svd(preds, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDError(f"SVD did not converge: {exc}") from exc
    return -float(np.sum(s)), -(U @ Vt)


def l1_histogram(preds: np.ndarray, prior: np.ndarray):
    """``sum_k |colsum_k(preds) - prior[k]|`` with the ``sign(0) = 0`` subgradient."""
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (preds.shape[1],):
        raise ValueError(f"prior length {prior.shape} does not match K={preds.shape[1]}")
    dev = preds.sum(axis=0) - prior
    grad = np.broadcast_to(np.sign(dev), preds.shape).copy()
    return float(np.abs(dev).sum()), grad


def entropy(preds: np.ndarray):
    """Mean per-row Shannon entropy (used by the SHOT baseline objective)."""
    B = preds.shape[0]
    p = np.maximum(preds, LOG_CLAMP)
    value = -np.sum(p * np.log(p)) / B
    grad = -(np.log(p) + 1.0) / B
    return float(value), grad


def neg_marginal_entropy(preds: np.ndarray):
    """``sum_k pbar_k log pbar_k`` of the batch-mean prediction."""
    B = preds.shape[0]
    pbar = np.maximum(preds.mean(axis=0), LOG_CLAMP)
    value = np.sum(pbar * np.log(pbar))
    grad = np.broadcast_to((np.log(pbar) + 1.0) / B, preds.shape).copy()
    return float(value), grad


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    nn: float
    l1: float
    total: float
    weights: tuple[float, float, float]


def combine(ce: float, nn: float, l1: float, weights=DEFAULT_WEIGHTS) -> LossBreakdown:
    w1, w2, w3 = weights
    if min(weights) < 0:
        raise ValueError("loss weights must be >= 0")
    return LossBreakdown(ce, nn, l1, w1 * ce + w2 * nn + w3 * l1, tuple(weights))
