"""Feasibility checks and constants from the generalization analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NOT_COMPUTABLE = "not computable"
FEAS_TOL = 1e-9


class AssumptionViolation(ValueError):
    """The estimated prior is too far from balanced for the tolerance gamma."""


def zeta(prior, gamma: float = 0.0, mode: str = "known") -> float:
    """Nuclear-norm threshold for the given class-count vector.

    ``known``: ``sum_k sqrt(n_k)``. ``estimate``: ``sum_k (sqrt(n_k) -
    gamma / (2 sqrt(n_min)))``, which requires ``gamma < 2 n_min``.
    """
    n = np.asarray(prior, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("class counts must be >= 0")
    if mode in ("known", "uniform"):
        return float(np.sum(np.sqrt(n)))
    if mode == "estimate":
        n_min = float(n.min())
        if not gamma < 2 * n_min:
            raise AssumptionViolation(f"gamma={gamma} >= 2*n_min={2 * n_min}")
        return float(np.sum(np.sqrt(n) - gamma / (2 * math.sqrt(n_min))))
    raise ValueError(f"unknown prior mode {mode!r}")


def c1_bound(d: float, N: float, rho: float) -> float:
    """``2 sqrt((d (log(2N/d) + 1) + log(4/rho)) / N)`` with natural logs."""
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    if not 1 <= d <= N:
        raise ValueError("need 1 <= d <= N")
    return 2.0 * math.sqrt((d * (math.log(2 * N / d) + 1) + math.log(4 / rho)) / N)


@dataclass
class BoundReport:
    c1: float | None
    d: float | None
    N: int
    rho: float | None
    zeta: float
    nuclear_norm: float
    prior_l1_gap: float
    nuclear_ok: bool
    l1_ok: bool
    mode: str
    # no estimator exists for these; kept so reports are complete
    eta_star: str = field(default=NOT_COMPUTABLE)
    d_H: str = field(default=NOT_COMPUTABLE)

    @property
    def feasible(self) -> bool:
        return self.nuclear_ok and self.l1_ok

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__} | {"feasible": self.feasible}


def feasibility_check(labels: np.ndarray, prior, gamma: float, mode: str = "known",
                      d: float | None = None, rho: float | None = None) -> BoundReport:
    """Check whether a one-hot labeling satisfies both adaptation constraints.

    For one-hot rows the nuclear norm equals ``sum_k sqrt(n_k)`` over the
    column counts, so no SVD is needed. ``prior`` is the count vector the
    histogram is compared against (``N * alpha`` or the estimate). If ``d``
    and ``rho`` are given the c1 constant is included.
    """
    Q = np.asarray(labels, dtype=np.float64)
    if Q.ndim != 2 or not np.all((Q == 0) | (Q == 1)) or not np.all(Q.sum(axis=1) == 1):
        raise ValueError("labels must be a one-hot N x K matrix")
    prior = np.asarray(prior, dtype=np.float64)
    counts = Q.sum(axis=0)
    nuc = float(np.sum(np.sqrt(counts)))
    z = zeta(prior, gamma, mode)
    gap = float(np.abs(counts - prior).sum())
    N = Q.shape[0]
    c1 = c1_bound(d, N, rho) if d is not None and rho is not None else None
    return BoundReport(c1=c1, d=d, N=N, rho=rho, zeta=z, nuclear_norm=nuc, prior_l1_gap=gap,
                       nuclear_ok=nuc >= z - FEAS_TOL * max(1.0, abs(z)),
                       l1_ok=gap <= gamma + FEAS_TOL * max(1.0, gamma), mode=mode)
