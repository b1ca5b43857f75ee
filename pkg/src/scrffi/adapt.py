"""Source training and source-free adaptation to a new receiver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .losses import LossBreakdown
from .nn_core import (ArchDescriptor, ModelState, backward, forward, freeze_classifier,
                      init_model, opt_step, predict)
from .pseudo_label import (DEFAULT_BETA, DEFAULT_TAU, init_centers, mcsp_soft_labels,
                           mcsp_update_centers, shot_hard_labels)
from .signal_sim import UNLABELED, IQRecord

log = logging.getLogger(__name__)

PRIOR_MODES = ("known", "uniform", "estimate")
L1_SCOPES = ("batch", "dataset")
L1_NORMS = ("sqrt_batch", "none")
SOURCE_EPOCHS = 7
SOURCE_LR = 0.002
GAMMA_FRACTION = 0.05
PRIOR_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AdaptConfig:
    """Adaptation hyper-parameters.

    ``gamma`` is the histogram tolerance in samples; ``None`` means
    ``GAMMA_FRACTION * N`` for the target set at hand.

    ``l1_norm="sqrt_batch"`` divides the histogram term by ``sqrt(B)`` so it
    lives on the same scale as the batch nuclear norm (between ``sqrt(B)``
    and ``sqrt(B K)``); ``"none"`` uses raw sample counts, where the
    subgradient is +-1 per entry and easily swamps the other terms.

    ``l1_scope="batch"`` compares the batch histogram with ``(B/N) q``.
    ``"dataset"`` compares the full-set histogram with ``q``, where rows
    outside the batch come from a bank of their latest predictions.
    """

    lambda1: float = 0.3
    lambda2: float = 1.0
    lambda3: float = 0.5
    tau: float = DEFAULT_TAU
    beta: float = DEFAULT_BETA
    gamma: float | None = None
    lr: float = 0.0006
    epochs: int = 20
    batch_size: int = 64
    prior_mode: str = "uniform"
    known_prior: tuple[float, ...] | None = None
    seed: int = 0
    l1_scope: str = "batch"
    l1_norm: str = "sqrt_batch"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must be in [0, 1)")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr > 0, epochs >= 0 and batch_size >= 1 required")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.l1_scope not in L1_SCOPES:
            raise ValueError(f"l1_scope must be one of {L1_SCOPES}")
        if self.l1_norm not in L1_NORMS:
            raise ValueError(f"l1_norm must be one of {L1_NORMS}")
        if (self.prior_mode == "known") != (self.known_prior is not None):
            raise ValueError("known_prior is required exactly when prior_mode is 'known'")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def resolved_gamma(self, n_target: int) -> float:
        return GAMMA_FRACTION * n_target if self.gamma is None else self.gamma


@dataclass(frozen=True)
class Variant:
    """Which parts of the adaptation objective are active.

    ``objective="shot"`` runs the SHOT baseline instead: entropy and
    marginal-entropy terms plus cross-entropy on epoch-level hard labels.
    """

    name: str
    adapt: bool = True
    use_nn_l1: bool = True
    use_soft: bool = True
    use_momentum: bool = True
    objective: str = "ms_shot"

    def __post_init__(self):
        if self.use_momentum and not self.use_soft:
            raise ValueError("momentum centers only apply to soft labels")


VARIANTS = {
    "source_only": Variant("source_only", adapt=False, use_nn_l1=False, use_soft=False,
                           use_momentum=False),
    "shot": Variant("shot", use_nn_l1=False, use_soft=False, use_momentum=False,
                    objective="shot"),
    "ms_shot": Variant("ms_shot"),
    "nn_l1": Variant("nn_l1", use_soft=False, use_momentum=False),
    "soft": Variant("soft", use_nn_l1=False, use_momentum=False),
    "nn_l1_soft": Variant("nn_l1_soft", use_momentum=False),
}
# component table: no components, L_nn & L_l1, soft label, both, all three
ABLATION_ROWS = ("source_only", "nn_l1", "soft", "nn_l1_soft", "ms_shot")


@dataclass
class EpochReport:
    epoch: int
    losses: LossBreakdown
    accuracy: float | None
    prior_estimate: np.ndarray
    center_drift: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "ce": self.losses.ce, "nn": self.losses.nn,
                "l1": self.losses.l1, "total": self.losses.total,
                "accuracy": self.accuracy, "prior_estimate": self.prior_estimate.tolist(),
                "center_drift": self.center_drift}


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=np.float64), np.asarray(y)
    if isinstance(data, np.ndarray):
        return data.astype(np.float64), np.full(len(data), UNLABELED)
    x = np.stack([r.samples for r in data]).astype(np.float64)
    return x, np.array([r.label for r in data])


def accuracy(model: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    _, probs = predict(model, x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def train_source(dataset, epochs: int = SOURCE_EPOCHS, lr: float = SOURCE_LR, seed: int = 0,
                 batch_size: int = 64, arch: ArchDescriptor | None = None,
                 num_classes: int | None = None) -> ModelState:
    """Supervised hard-label cross-entropy training of the whole network."""
    x, y = _arrays(dataset)
    if len(x) == 0:
        raise ValueError("empty source dataset")
    if np.any(y == UNLABELED):
        raise ValueError("source training needs labeled records")
    if arch is None:
        K = num_classes if num_classes is not None else int(y.max()) + 1
        arch = ArchDescriptor(length=x.shape[2], num_classes=K)
    if y.max() >= arch.num_classes:
        raise ValueError("label exceeds the architecture's class count")
    model = init_model(arch, seed)
    rng = np.random.default_rng([seed, 1])
    onehot = np.eye(arch.num_classes)[y]
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), batch_size):
            idx = order[s:s + batch_size]
            _, p, tape = forward(model, x[idx], "train")
            _, g = losses.soft_cross_entropy(p, onehot[idx])
            g_feat, g_cls = backward(model, tape, g, with_classifier=True)
            opt_step(model, g_feat, lr, cls_grad=g_cls)
        log.debug("source epoch %d done", epoch + 1)
    model.reset_optimizer()
    return model


def resolve_prior(mode: str, n_target: int, num_classes: int, known=None,
                  pseudo_probs: np.ndarray | None = None) -> np.ndarray:
    """Reference class-count vector for the histogram term.

    ``known`` may be given as proportions (summing to 1) or as counts
    (summing to ``n_target``).
    """
    if mode == "known":
        if known is None:
            raise ValueError("known prior mode needs a prior")
        q = np.asarray(known, dtype=np.float64)
        if q.shape != (num_classes,) or np.any(q < 0):
            raise ValueError("known prior must be a nonnegative length-K vector")
        if abs(q.sum() - 1.0) <= PRIOR_SUM_TOL:
            q = q * n_target
        elif abs(q.sum() - n_target) > PRIOR_SUM_TOL * max(n_target, 1):
            raise ValueError(f"known prior sums to {q.sum()}, expected 1 or {n_target}")
        return q
    if mode == "uniform":
        return np.full(num_classes, n_target / num_classes)
    if mode == "estimate":
        if pseudo_probs is None:
            raise ValueError("estimate mode needs pseudo-label outputs")
        return pseudo_probs.sum(axis=0)
    raise ValueError(f"unknown prior mode {mode!r}")


def adapt(source_model: ModelState, target, cfg: AdaptConfig = AdaptConfig(),
          variant: Variant | str = "ms_shot", eval_set=None):
    """Adapt a copy of ``source_model`` to unlabeled ``target`` data.

    The classifier head is frozen; only the feature extractor moves. At each
    epoch start the pseudo-labeler (the current model) is re-clustered on
    the full target set in eval mode and the class prior is resolved; each
    batch then updates the momentum centers, computes soft labels, and takes
    one Adam step. ``eval_set`` is ``(x, y)`` used only for reporting.

    Returns ``(adapted_model, reports)``.
    """
    if isinstance(variant, str):
        variant = VARIANTS[variant]
    x, _ = _arrays(target)
    N = len(x)
    if cfg.batch_size > N:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds target size {N}")
    K = source_model.arch.num_classes
    model = source_model.copy()
    model.reset_optimizer()
    freeze_classifier(model)
    if variant.objective == "shot":
        weights = (1.0, 0.0, 0.0)
        active = True
    else:
        weights = (cfg.lambda1 if variant.use_soft else 0.0,
                   cfg.lambda2 if variant.use_nn_l1 else 0.0,
                   cfg.lambda3 if variant.use_nn_l1 else 0.0)
        active = variant.adapt and any(w > 0 for w in weights)
    ev = None if eval_set is None else _arrays(eval_set)
    rng = np.random.default_rng([cfg.seed, 2])
    reports = []
    for epoch in range(cfg.epochs):
        feats, probs = predict(model, x)
        shot = shot_hard_labels(feats, init_centers(feats, probs))
        centers = start = shot.centers
        q = resolve_prior(cfg.prior_mode, N, K, cfg.known_prior, probs)
        bank = probs.copy()
        bank_sum = bank.sum(axis=0)
        order = rng.permutation(N)
        sums = np.zeros(3)
        n_batches = 0
        for s in range(0, N, cfg.batch_size):
            if not active:
                break
            idx = order[s:s + cfg.batch_size]
            B = len(idx)
            f, p, tape = forward(model, x[idx], "train")
            if variant.objective == "shot":
                ent, g_ent = losses.entropy(p)
                div, g_div = losses.neg_marginal_entropy(p)
                ce, g_ce = losses.soft_cross_entropy(p, shot.soft[idx])
                grad = g_ent + g_div + cfg.lambda1 * g_ce
                terms = (ce, ent, div)
            else:
                grad = np.zeros_like(p)
                ce = nn = l1 = 0.0
                if variant.use_soft:
                    if variant.use_momentum:
                        centers = mcsp_update_centers(centers, f, p, cfg.beta)
                    soft = mcsp_soft_labels(f, centers, cfg.tau)
                    ce, g = losses.soft_cross_entropy(p, soft)
                    grad += weights[0] * g
                if variant.use_nn_l1:
                    nn, g = losses.neg_nuclear_norm(p)
                    grad += weights[1] * g
                    if cfg.l1_scope == "dataset":
                        # rows outside the batch enter as constants from the bank
                        ref = q - (bank_sum - bank[idx].sum(axis=0))
                    else:
                        ref = q * (B / N)
                    l1, g = losses.l1_histogram(p, ref)
                    if cfg.l1_norm == "sqrt_batch":
                        l1, g = l1 / np.sqrt(B), g / np.sqrt(B)
                    grad += weights[2] * g
                terms = (ce, nn, l1)
            opt_step(model, backward(model, tape, grad), cfg.lr)
            bank_sum += p.sum(axis=0) - bank[idx].sum(axis=0)
            bank[idx] = p
            sums += terms
            n_batches += 1
        mean = sums / max(n_batches, 1)
        rep = EpochReport(
            epoch=epoch + 1,
            losses=losses.combine(*mean, weights=weights),
            accuracy=None if ev is None else accuracy(model, *ev),
            prior_estimate=q,
            center_drift=float(np.mean(np.linalg.norm(centers.centers - start.centers, axis=1))),
        )
        log.info("epoch %d acc=%s total=%.4f", rep.epoch, rep.accuracy, rep.losses.total)
        reports.append(rep)
    return model, reports


def window_stats(accuracies, window: int = 5) -> tuple[float, float]:
    """Mean and population std of the last ``window`` accuracies."""
    tail = np.asarray(accuracies[-window:], dtype=np.float64)
    return float(tail.mean()), float(tail.std())
