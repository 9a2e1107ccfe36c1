"""Representation-space soft alignment (RS2).

Visual embeddings are pulled toward the frozen text-embedding space via a
min-cosine-distance alignment loss, and a small text-constrained classifier
scores both visual and text embeddings so alignment lands in discriminative
regions.  Convention fixed package-wide: y=1 live, y=0 spoof, and classifier
outputs are spoof probabilities, which makes the literal loss terms
y*log(1-x) + (1-y)*log(x) decrease for correct behavior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .core_types import (
    ConfigError,
    EmbeddingBatch,
    NumericError,
    TextSpace,
    ValidationError,
    derive_seed,
)

DISTANCE_MODES = ("nearest_any", "nearest_own_class")
ALIGNMENT_VARIANTS = ("vanilla", "smooth", "rs2")
REDUCTIONS = ("mean", "sum")

_CLAMP = 1e-6  # keeps log() finite when a distance or probability hits 0/1


def _log_clamped(x: torch.Tensor) -> torch.Tensor:
    # clamp inside the log so a term with an exactly-zero coefficient
    # contributes exactly zero instead of coefficient * log(clamped endpoint)
    return torch.log(x.clamp(min=_CLAMP))


@dataclass
class RS2Config:
    """Settings for the alignment losses (config section: rs2)."""

    label_smoothing: float = 0.1
    distance_mode: str = "nearest_own_class"
    alignment_variant: str = "rs2"
    reduction: str = "mean"

    def validate(self) -> "RS2Config":
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError(
                f"rs2.label_smoothing must lie in [0, 0.5), got {self.label_smoothing}"
            )
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"rs2.distance_mode must be one of {DISTANCE_MODES}")
        if self.alignment_variant not in ALIGNMENT_VARIANTS:
            raise ConfigError(f"rs2.variant must be one of {ALIGNMENT_VARIANTS}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"rs2.reduction must be one of {REDUCTIONS}")
        return self


class TextConstrainedClassifier(nn.Module):
    """Affine map + sigmoid shared by text and visual embeddings.

    The sigmoid output is the probability of SPOOF.
    """

    def __init__(self, n_d: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(derive_seed(seed, "clf"))
        self.w = nn.Parameter(
            torch.randn(n_d, generator=gen, dtype=torch.float64) * n_d ** -0.5
        )
        self.b = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return e @ self.w + self.b

    def spoof_prob(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(e))


class RS2Loss(NamedTuple):
    total: torch.Tensor
    l_cls: torch.Tensor
    l_align: torch.Tensor


def min_cosine_distance(
    v: torch.Tensor,
    text_space: TextSpace,
    mode: str = "nearest_any",
    own_class: int | None = None,
) -> torch.Tensor:
    """Minimum cosine distance from one vector to the selected text rows.

    mode "nearest_any" scans every row; "nearest_own_class" restricts to the
    rows whose caption class equals own_class.  Result lies in [0, 2].
    """
    if mode not in DISTANCE_MODES:
        raise ConfigError(f"unknown distance mode {mode!r}")
    norm = v.norm()
    if norm < 1e-12:
        raise NumericError("min_cosine_distance: zero-norm embedding")
    rows = text_space.embeddings
    if mode == "nearest_own_class":
        if own_class is None:
            raise ValidationError("nearest_own_class requires own_class")
        rows = text_space.rows_of_class(own_class)
    if rows.shape[0] == 0:
        raise ValidationError("no text rows to compare against")
    cos = (rows @ v) / (norm * rows.norm(dim=-1))
    return (1.0 - cos).min()


def _batch_distances(
    pooled: torch.Tensor,
    labels: torch.Tensor,
    text_space: TextSpace,
    mode: str,
) -> torch.Tensor:
    norms = pooled.norm(dim=-1)
    if (norms < 1e-12).any():
        raise NumericError("zero-norm visual embedding")
    cos = (pooled @ text_space.embeddings.T) / (
        norms[:, None] * text_space.embeddings.norm(dim=-1)[None, :]
    )
    dist = 1.0 - cos
    if mode == "nearest_own_class":
        # mask out rows of the other class before taking the min
        allowed = text_space.class_of[None, :] == labels[:, None]
        dist = torch.where(allowed, dist, torch.full_like(dist, torch.inf))
    return dist.min(dim=-1).values


def _soft_targets(labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    y = labels.to(torch.float64)
    return y * (1.0 - epsilon) + (1.0 - y) * epsilon


def _reduce(per_item: torch.Tensor, reduction: str) -> torch.Tensor:
    return per_item.mean() if reduction == "mean" else per_item.sum()


def alignment_loss(
    visual: EmbeddingBatch,
    text_space: TextSpace,
    cfg: RS2Config,
    epsilon: float | None = None,
) -> torch.Tensor:
    """Soft alignment loss from min-cosine distances to the text space.

    Log arguments are clamped at 1e-6 so endpoint distances stay finite;
    labels are smoothed by epsilon (cfg.label_smoothing unless overridden).
    """
    eps = cfg.label_smoothing if epsilon is None else epsilon
    d = _batch_distances(visual.pooled, visual.labels, text_space, cfg.distance_mode)
    y = _soft_targets(visual.labels, eps)
    per = -(y * _log_clamped(1.0 - d) + (1.0 - y) * _log_clamped(d))
    return _reduce(per, cfg.reduction)


def classification_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    clf: TextConstrainedClassifier,
    cfg: RS2Config,
    epsilon: float | None = None,
) -> torch.Tensor:
    """Text-constrained classification loss over any mix of embeddings.

    Callers pass the union of visual and text embeddings with their labels;
    p = sigmoid(w.e + b) is the spoof probability.
    """
    eps = cfg.label_smoothing if epsilon is None else epsilon
    p = clf.spoof_prob(embeddings)
    y = _soft_targets(labels, eps)
    per = -(y * _log_clamped(1.0 - p) + (1.0 - y) * _log_clamped(p))
    return _reduce(per, cfg.reduction)


def rs2_loss(
    visual: EmbeddingBatch,
    text_space: TextSpace,
    clf: TextConstrainedClassifier,
    cfg: RS2Config,
) -> RS2Loss:
    """Combined loss: classification + alignment, per the configured variant.

    vanilla: hard (unsmoothed) alignment only; smooth: smoothed alignment
    only; rs2: smoothed alignment plus the classifier term over the union of
    visual and text embeddings.  total is exactly l_cls + l_align.
    """
    cfg.validate()
    variant = cfg.alignment_variant
    l_align = alignment_loss(
        visual, text_space, cfg, epsilon=0.0 if variant == "vanilla" else None
    )
    if variant == "rs2":
        union = torch.cat([visual.pooled, text_space.embeddings], dim=0)
        union_labels = torch.cat([visual.labels, text_space.class_of])
        l_cls = classification_loss(union, union_labels, clf, cfg)
    else:
        l_cls = torch.zeros((), dtype=torch.float64)
    return RS2Loss(total=l_cls + l_align, l_cls=l_cls, l_align=l_align)
