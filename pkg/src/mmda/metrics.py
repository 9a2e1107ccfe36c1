"""Biometric verification metrics: AUC, EER threshold, HTER.

Scores throughout are spoof probabilities in [0, 1]; a sample is accepted
as live when its score falls at or below the threshold.  AUC is therefore
computed on liveness = 1 - score so that higher means more live.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_types import ModalityKind, ValidationError


@dataclass(frozen=True)
class ScoreRecord:
    """One scored sample: spoof probability, truth, and provenance."""

    score: float
    label: int                 # 1 live / 0 spoof
    domain: str
    modality_mask: frozenset[ModalityKind]

    def __post_init__(self) -> None:
        object.__setattr__(self, "modality_mask", frozenset(self.modality_mask))
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValidationError(f"label {self.label} not in {{0, 1}}")


def split_scores(records: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Return (live_scores, spoof_scores); both classes must be present."""
    live = np.array([r.score for r in records if r.label == 1], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label == 0], dtype=np.float64)
    if live.size == 0 or spoof.size == 0:
        raise ValidationError(
            f"need both classes: {live.size} live / {spoof.size} spoof records"
        )
    return live, spoof


def _tie_averaged_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1..j+1
        i = j + 1
    return ranks


def auc(records: Sequence[ScoreRecord]) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) statistic.

    Equals the probability that a random live sample looks more live than a
    random spoof sample, ties counting one half.
    """
    live, spoof = split_scores(records)
    liveness = 1.0 - np.concatenate([live, spoof])
    ranks = _tie_averaged_ranks(liveness)
    n_live, n_spoof = live.size, spoof.size
    u = ranks[:n_live].sum() - n_live * (n_live + 1) / 2.0
    return float(u / (n_live * n_spoof))


def far_frr(records: Sequence[ScoreRecord], tau: float) -> tuple[float, float]:
    """False acceptance (spoof passed as live) and false rejection rates."""
    live, spoof = split_scores(records)
    far = float(np.mean(spoof <= tau))
    frr = float(np.mean(live > tau))
    return far, frr


def eer_threshold(records: Sequence[ScoreRecord]) -> float:
    """Threshold minimizing |FAR - FRR| over midpoints of distinct scores.

    Ties resolve toward the smaller threshold.  When every score is
    identical there is no midpoint and the lone score is the candidate.
    """
    live, spoof = split_scores(records)
    distinct = np.unique(np.concatenate([live, spoof]))
    if distinct.size == 1:
        candidates = distinct
    else:
        candidates = (distinct[:-1] + distinct[1:]) / 2.0
    best_tau, best_gap = None, None
    for tau in candidates:
        far, frr = far_frr(records, float(tau))
        gap = abs(far - frr)
        if best_gap is None or gap < best_gap:
            best_tau, best_gap = float(tau), gap
    return best_tau


def hter(records: Sequence[ScoreRecord], tau: float) -> float:
    """Half total error rate (FAR + FRR) / 2 at threshold tau."""
    far, frr = far_frr(records, tau)
    return (far + frr) / 2.0
