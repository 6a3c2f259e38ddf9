"""Strength, correlation and the ensemble generalization-error bound.

Every head is treated as one voter.  For an example with true class y the
margin is the fraction of heads voting y minus the largest fraction voting
any single wrong class.  Strength is the mean margin; correlation is the mean
pairwise Pearson coefficient of the per-head raw margins; the bound is
rho * (1 - s^2) / s^2.

Reductions go through :func:`math.fsum` so results do not depend on the
summation order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class VoteTable:
    predictions: np.ndarray  # M x h predicted class per (example, head)
    labels: np.ndarray  # M
    num_classes: int

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.predictions.ndim != 2 or self.predictions.shape[0] != self.labels.shape[0]:
            raise ValueError(f"predictions {self.predictions.shape} vs labels {self.labels.shape}")
        k = self.num_classes
        for arr in (self.predictions, self.labels):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"class indices must lie in [0, {k})")

    @property
    def num_examples(self) -> int:
        return self.predictions.shape[0]

    @property
    def num_heads(self) -> int:
        return self.predictions.shape[1]

    @classmethod
    def from_probs(cls, per_head_probs, labels) -> "VoteTable":
        """Argmax vote per head (lowest class index on exact ties)."""
        probs = [np.asarray(p) for p in per_head_probs]
        preds = np.stack([p.argmax(axis=1) for p in probs], axis=1)
        return cls(preds, labels, probs[0].shape[1])


def _vote_shares(votes: VoteTable) -> np.ndarray:
    m, h = votes.predictions.shape
    counts = np.zeros((m, votes.num_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(m), h), votes.predictions.ravel()), 1)
    return counts / h


def _top_wrong(shares: np.ndarray, labels: np.ndarray) -> np.ndarray:
    masked = shares.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return masked.argmax(axis=1)


def margin(votes: VoteTable) -> np.ndarray:
    if votes.num_heads == 0:
        raise ValueError("margin needs at least one head")
    shares = _vote_shares(votes)
    rows = np.arange(votes.num_examples)
    j_hat = _top_wrong(shares, votes.labels)
    return shares[rows, votes.labels] - shares[rows, j_hat]


def strength(votes: VoteTable) -> float:
    if votes.num_examples == 0:
        raise ValueError("strength needs at least one example")
    return math.fsum(margin(votes)) / votes.num_examples


def raw_margin(votes: VoteTable) -> np.ndarray:
    """M x h table: +1 head votes the truth, -1 it votes the top wrong class, else 0."""
    shares = _vote_shares(votes)
    j_hat = _top_wrong(shares, votes.labels)
    preds = votes.predictions
    return (preds == votes.labels[:, None]).astype(np.int64) - (preds == j_hat[:, None]).astype(np.int64)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson coefficient; 0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = len(a)
    da = a - math.fsum(a) / n
    db = b - math.fsum(b) / n
    va = math.fsum(da * da)
    vb = math.fsum(db * db)
    if va == 0.0 or vb == 0.0:
        return 0.0
    return math.fsum(da * db) / math.sqrt(va * vb)


def correlation(psi: np.ndarray) -> tuple[float, list[float]]:
    """Mean pairwise Pearson correlation of raw-margin columns, plus the pairs."""
    psi = np.asarray(psi)
    m, h = psi.shape
    if h < 2:
        raise ValueError("correlation needs at least two heads")
    if m < 2:
        raise ValueError("correlation needs at least two examples")
    pairs = [pearson(psi[:, i], psi[:, j]) for i, j in itertools.combinations(range(h), 2)]
    return math.fsum(pairs) / len(pairs), pairs


class NonPositiveStrengthError(ValueError):
    pass


def generalization_bound(s: float, rho: float) -> float:
    if not s > 0:
        raise NonPositiveStrengthError(f"the bound needs strength > 0, got {s}")
    return rho * (1.0 - s * s) / (s * s)


@dataclass
class DiagnosticsReport:
    strength: float
    correlation: float
    bound: float
    pair_correlations: list[float] = field(default_factory=list)
    margins: np.ndarray | None = None

    def summary(self) -> dict[str, float]:
        return {"strength": self.strength, "rho": self.correlation, "bound": self.bound}


def diagnose(votes: VoteTable) -> DiagnosticsReport:
    """Full report.  ``bound`` is NaN when strength is not positive."""
    margins = margin(votes)
    s = math.fsum(margins) / votes.num_examples
    rho, pairs = correlation(raw_margin(votes))
    bound = generalization_bound(s, rho) if s > 0 else float("nan")
    return DiagnosticsReport(s, rho, bound, pairs, margins)
