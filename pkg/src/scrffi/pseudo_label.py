"""Pseudo-labels for unlabeled target data.

Two schemes share the same center machinery: an epoch-level hard labeling
(prediction-weighted centroids, cosine assignment, one refinement pass) and
a per-batch soft labeling against exponentially smoothed class centers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nn_core import softmax

WEIGHT_EPS = 1e-9
NORM_EPS = 1e-9
DEFAULT_TAU = 0.1
DEFAULT_BETA = 0.995


@dataclass(frozen=True)
class ClassCenters:
    centers: np.ndarray  # (K, d)
    valid: np.ndarray  # (K,) bool
    batch_index: int = 0

    @property
    def invalid_classes(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(~self.valid)]


@dataclass(frozen=True)
class PseudoLabelAssignment:
    hard: np.ndarray  # (N,) int
    soft: np.ndarray  # (N, K)
    source: str
    centers: ClassCenters | None = None


def _weighted_means(features: np.ndarray, weights: np.ndarray):
    mass = weights.sum(axis=0)
    valid = mass >= WEIGHT_EPS
    sums = weights.T @ features
    centers = np.zeros_like(sums)
    centers[valid] = sums[valid] / mass[valid, None]
    # a weighted mean can still vanish (features cancelling out)
    valid &= np.linalg.norm(centers, axis=1) > NORM_EPS
    return centers, valid


def init_centers(features: np.ndarray, probs: np.ndarray) -> ClassCenters:
    """Prediction-weighted class means over the whole target set."""
    if len(features) == 0:
        raise ValueError("cannot compute centers of an empty dataset")
    centers, valid = _weighted_means(features, probs)
    return ClassCenters(centers, valid)


def cosine_similarity(features: np.ndarray, centers: ClassCenters) -> np.ndarray:
    """``(N, K)`` cosine similarities; invalid centers get ``-inf``.

    Zero-norm feature rows get similarity 0 to every valid center.
    """
    fn = np.linalg.norm(features, axis=1, keepdims=True)
    f = np.divide(features, fn, out=np.zeros_like(features), where=fn > NORM_EPS)
    cn = np.linalg.norm(centers.centers, axis=1, keepdims=True)
    c = np.divide(centers.centers, cn, out=np.zeros_like(centers.centers), where=cn > NORM_EPS)
    sim = f @ c.T
    sim[:, ~centers.valid] = -np.inf
    return sim


def _one_hot(idx: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((len(idx), K))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def shot_hard_labels(features: np.ndarray, centers: ClassCenters) -> PseudoLabelAssignment:
    """Two-pass cosine clustering starting from ``centers``.

    Pass one assigns each sample to its most similar initial center; the
    centers are then replaced by hard-assignment means (a class left empty
    keeps its initial center) and samples are re-assigned. Ties go to the
    lowest class index.
    """
    if not centers.valid.any():
        raise ValueError("no valid class centers")
    K = centers.centers.shape[0]
    first = np.argmax(cosine_similarity(features, centers), axis=1)
    refined, valid = _weighted_means(features, _one_hot(first, K))
    keep = ~valid
    refined[keep] = centers.centers[keep]
    refined_centers = ClassCenters(refined, valid | centers.valid, centers.batch_index)
    hard = np.argmax(cosine_similarity(features, refined_centers), axis=1)
    return PseudoLabelAssignment(hard, _one_hot(hard, K), "shot", refined_centers)


def mcsp_update_centers(centers: ClassCenters, batch_features: np.ndarray,
                        batch_probs: np.ndarray, beta: float = DEFAULT_BETA) -> ClassCenters:
    """Momentum update ``c <- beta*c + (1-beta)*batch_mean``.

    Classes with no batch weight keep their center; a class whose center was
    never valid takes the batch mean directly.
    """
    if not 0 <= beta < 1:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if len(batch_features) == 0:
        raise ValueError("empty batch")
    if batch_probs.shape != (len(batch_features), centers.centers.shape[0]):
        raise ValueError("batch_probs shape does not match features and centers")
    means, seen = _weighted_means(batch_features, batch_probs)
    new = centers.centers.copy()
    mix = seen & centers.valid
    new[mix] = beta * centers.centers[mix] + (1 - beta) * means[mix]
    fresh = seen & ~centers.valid
    new[fresh] = means[fresh]
    valid = centers.valid | seen
    valid &= np.linalg.norm(new, axis=1) > NORM_EPS
    return ClassCenters(new, valid, centers.batch_index + 1)


def mcsp_soft_labels(batch_features: np.ndarray, centers: ClassCenters,
                     tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax over classes of cosine similarity divided by ``tau``."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not centers.valid.any():
        raise ValueError("no valid class centers")
    sim = cosine_similarity(batch_features, centers)
    out = softmax(sim / tau)
    degenerate = np.linalg.norm(batch_features, axis=1) <= NORM_EPS
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} zero-norm feature rows get uniform soft labels",
                      RuntimeWarning, stacklevel=2)
        out[degenerate] = 1.0 / out.shape[1]
    return out
