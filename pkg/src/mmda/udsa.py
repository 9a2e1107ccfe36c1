"""U-shaped dual space adaptation (U-DSA).

A depth-d stack of Adapt MLPs runs the pooled embedding forward, then a
deep-to-shallow pass adds Remap residuals: the deepest output is taken as
is, and each shallower space receives its own forward value plus a remap of
the enhanced embedding one level deeper.  Every one of the d+1 spaces is
aligned with the RS2 losses, and inference exits at the layer with the best
held-out HTER (ties break toward the shallowest layer).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

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
from .metrics import ScoreRecord, eer_threshold, hter
from .rs2 import RS2Config, RS2Loss, TextConstrainedClassifier, rs2_loss

ADAPTER_KINDS = ("dense", "moe")


@dataclass
class UDSAConfig:
    """Settings for the adaptation stack (config section: udsa)."""

    n_d: int = 64
    depth: int = 7
    adapter_kind: str = "dense"
    n_experts: int = 4
    top_k: int = 2

    def validate(self) -> "UDSAConfig":
        if self.depth < 1:
            raise ConfigError(f"udsa.depth must be >= 1, got {self.depth}")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"udsa.adapter_kind must be one of {ADAPTER_KINDS}")
        if self.adapter_kind == "moe":
            if self.n_experts < 2:
                raise ConfigError("udsa.n_experts must be >= 2 for the moe adapter")
            if not 1 <= self.top_k <= self.n_experts:
                raise ConfigError(
                    f"udsa.top_k={self.top_k} outside [1, n_experts={self.n_experts}]"
                )
        return self


class SquareMLP(nn.Module):
    """affine -> GELU -> affine, all widths n_d, so spaces stay comparable."""

    def __init__(self, n_d: int, seed: int):
        super().__init__()
        def weight(tag: str) -> nn.Parameter:
            gen = torch.Generator().manual_seed(derive_seed(seed, tag))
            return nn.Parameter(
                torch.randn(n_d, n_d, generator=gen, dtype=torch.float64) * n_d ** -0.5
            )
        self.w1 = weight("w1")
        self.b1 = nn.Parameter(torch.zeros(n_d, dtype=torch.float64))
        self.w2 = weight("w2")
        self.b2 = nn.Parameter(torch.zeros(n_d, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def moe_adapt(
    x: torch.Tensor,
    experts: Sequence[nn.Module],
    gate: nn.Module,
    top_k: int,
) -> torch.Tensor:
    """Soft-gated mixture: softmax gate, top_k experts, renormalized weights."""
    n_experts = len(experts)
    if not 1 <= top_k <= n_experts:
        raise ConfigError(f"top_k={top_k} outside [1, {n_experts}]")
    probs = torch.softmax(gate(x), dim=-1)                      # [B, E]
    vals, idx = probs.topk(top_k, dim=-1)
    weights = vals / vals.sum(dim=-1, keepdim=True)
    out = torch.zeros_like(x)
    for e, expert in enumerate(experts):
        chosen = idx == e                                       # [B, top_k]
        if not chosen.any():
            continue
        w_e = (weights * chosen).sum(dim=-1)                    # [B], zero if unselected
        out = out + w_e[:, None] * expert(x)
    return out


class MoEAdapter(nn.Module):
    """Mixture-of-experts Adapt map with a per-sample linear gate."""

    def __init__(self, n_d: int, n_experts: int, top_k: int, seed: int):
        super().__init__()
        self.top_k = top_k
        self.experts = nn.ModuleList(
            SquareMLP(n_d, derive_seed(seed, "expert", e)) for e in range(n_experts)
        )
        gen = torch.Generator().manual_seed(derive_seed(seed, "gate"))
        self.gate = nn.Linear(n_d, n_experts, dtype=torch.float64)
        with torch.no_grad():
            self.gate.weight.copy_(
                torch.randn(n_experts, n_d, generator=gen, dtype=torch.float64) * n_d ** -0.5
            )
            self.gate.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return moe_adapt(x, self.experts, self.gate, self.top_k)


class UDSAStack(nn.Module):
    """The Adapt maps (indices 1..d) and Remap maps (indices 0..d-1)."""

    def __init__(self, cfg: UDSAConfig, seed: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.adapter_kind == "moe":
            self.adapt = nn.ModuleList(
                MoEAdapter(cfg.n_d, cfg.n_experts, cfg.top_k, derive_seed(seed, "adapt", i))
                for i in range(1, cfg.depth + 1)
            )
        else:
            self.adapt = nn.ModuleList(
                SquareMLP(cfg.n_d, derive_seed(seed, "adapt", i))
                for i in range(1, cfg.depth + 1)
            )
        self.remap = nn.ModuleList(
            SquareMLP(cfg.n_d, derive_seed(seed, "remap", i)) for i in range(cfg.depth)
        )

    @property
    def depth(self) -> int:
        return self.cfg.depth

    def forward(self, v0: torch.Tensor) -> list[torch.Tensor]:
        return udsa_forward(v0, list(self.adapt), list(self.remap))


def udsa_forward(
    v0: torch.Tensor,
    adapt: Sequence[Callable[[torch.Tensor], torch.Tensor]],
    remap: Sequence[Callable[[torch.Tensor], torch.Tensor]],
) -> list[torch.Tensor]:
    """Two-pass U computation; returns the d+1 enhanced embeddings.

    Forward: v_i = Adapt_i(v_{i-1}) with v_0 the input (no Adapt applied).
    Backward: v'_d = v_d (no Remap), then v'_i = v_i + Remap_i(v'_{i+1})
    down to i = 0.
    """
    d = len(adapt)
    if len(remap) != d:
        raise ConfigError(f"need one Remap per Adapt: {len(remap)} vs {d}")
    vs = [v0]
    for i in range(1, d + 1):
        v = adapt[i - 1](vs[-1])
        if not torch.isfinite(v).all():
            raise NumericError(f"non-finite embedding out of Adapt layer {i}")
        vs.append(v)
    vprime = [None] * (d + 1)
    vprime[d] = vs[d]
    for i in range(d - 1, -1, -1):
        r = remap[i](vprime[i + 1])
        if not torch.isfinite(r).all():
            raise NumericError(f"non-finite embedding out of Remap layer {i}")
        vprime[i] = vs[i] + r
    return vprime


def per_layer_rs2(
    vprimes: Sequence[torch.Tensor],
    text_space: TextSpace,
    clf: TextConstrainedClassifier,
    cfg: RS2Config,
    labels: torch.Tensor,
    domains: Sequence[str],
) -> RS2Loss:
    """Unweighted mean of the RS2 loss over every layer output.

    Component means are computed separately so total == l_cls + l_align
    holds exactly for the returned triple as well.
    """
    if not vprimes:
        raise ValidationError("per_layer_rs2: empty layer list")
    losses = []
    for v in vprimes:
        emb = EmbeddingBatch(tokens=v.unsqueeze(1), pooled=v, labels=labels,
                             domains=tuple(domains))
        losses.append(rs2_loss(emb, text_space, clf, cfg))
    n = len(losses)
    l_cls = sum(l.l_cls for l in losses) / n
    l_align = sum(l.l_align for l in losses) / n
    return RS2Loss(total=l_cls + l_align, l_cls=l_cls, l_align=l_align)


def select_exit_layer(dev_scores_per_layer: Sequence[Sequence[ScoreRecord]]) -> int:
    """Pick the layer whose held-out HTER (at its own EER threshold) is best.

    Ties break toward the shallowest layer.
    """
    if not dev_scores_per_layer:
        raise ValidationError("select_exit_layer: no layers given")
    best_layer, best_hter = None, None
    for layer, records in enumerate(dev_scores_per_layer):
        if not records:
            raise ValidationError(f"select_exit_layer: empty score set at layer {layer}")
        h = hter(records, eer_threshold(records))
        if best_hter is None or h < best_hter:
            best_layer, best_hter = layer, h
    return best_layer
