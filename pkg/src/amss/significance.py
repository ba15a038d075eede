"""Modal significance from a variational mutual-information rate.

Each modality's significance is the Barber-Agakov lower bound on
I(X_k; Y) divided by an entropy estimate for X_k, smoothed with an
exponential moving average. Update ratios are the complement of a
temperature softmax over the smoothed significances, so the most
significant modality gets the smallest share of updated units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PROB_FLOOR = 1e-12
ENTROPY_FLOOR = 1e-6


def label_entropy(y) -> float:
    """Shannon entropy (nats) of the empirical label distribution of a one-hot batch."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("labels must be a non-empty (B, C) one-hot matrix")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    p = y.mean(axis=0)
    p = p[p > 0]
    return float(max(-(p * np.log(p)).sum(), 0.0))


def distribution_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(max(-(p * np.log(p)).sum(), 0.0))


def mi_lower_bound(true_class_probs, h_y: float) -> float:
    """``H(Y) + mean(log q(y_i | x_i))``; may be negative for a poor classifier."""
    q = np.asarray(true_class_probs, dtype=np.float64)
    if q.size == 0:
        raise ValueError("need at least one probability")
    if np.any(q <= 0) or np.any(q > 1):
        raise ValueError("true-class probabilities must lie in (0, 1]")
    if h_y < 0:
        raise ValueError("label entropy must be non-negative")
    return float(h_y + np.log(q).mean())


def mi_rate(mi_lb: float, h_x: float, floor: float = ENTROPY_FLOOR) -> float:
    return float(mi_lb / max(h_x, floor))


def modality_entropy(probs) -> float:
    """Entropy proxy for a modality: entropy of its batch-mean predictive distribution."""
    probs = np.asarray(probs, dtype=np.float64)
    return max(distribution_entropy(probs.mean(axis=0)), ENTROPY_FLOOR)


def significance_from_probs(probs, y) -> float:
    """Instantaneous significance of one modality from its unimodal predictions."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    q = np.clip((probs * y).sum(axis=1), PROB_FLOOR, 1.0)
    return mi_rate(mi_lower_bound(q, label_entropy(y)), modality_entropy(probs))


def update_ratios_from(u, tau: float) -> np.ndarray:
    """``1 - softmax(u / tau)`` with max-subtraction for stability."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(u, dtype=np.float64) / tau
    z = z - z.max()
    e = np.exp(z)
    return 1.0 - e / e.sum()


def imbalance_degree(u, eps: float = ENTROPY_FLOOR) -> float:
    """Ratio of the first two significances, each floored at ``eps``."""
    u = np.asarray(u, dtype=np.float64)
    return float(max(u[0], eps) / max(u[1], eps))


@dataclass
class SignificanceState:
    """EMA of per-modality significance.

    ``lam`` weights the history; the first update copies the estimate
    directly rather than blending with an arbitrary start value.
    """

    n_modalities: int
    lam: float = 0.9
    tau: float = 0.25
    u: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.n_modalities < 2:
            raise ValueError("need at least two modalities")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def initialized(self) -> bool:
        return self.u is not None

    def update(self, u_hat) -> "SignificanceState":
        u_hat = np.asarray(u_hat, dtype=np.float64)
        if u_hat.shape != (self.n_modalities,):
            raise ValueError(f"expected {self.n_modalities} estimates, got shape {u_hat.shape}")
        if self.u is None:
            self.u = u_hat.copy()
        else:
            self.u = self.lam * self.u + (1.0 - self.lam) * u_hat
        return self

    def ratios(self) -> np.ndarray:
        if self.u is None:
            return np.full(self.n_modalities, 1.0 - 1.0 / self.n_modalities)
        return update_ratios_from(self.u, self.tau)

    def snapshot(self) -> np.ndarray:
        return None if self.u is None else self.u.copy()


def update_significance(state: SignificanceState, u_hat) -> SignificanceState:
    return state.update(u_hat)


def update_ratios(state: SignificanceState) -> np.ndarray:
    return state.ratios()
