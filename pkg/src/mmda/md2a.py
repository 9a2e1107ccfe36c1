"""Modality-domain joint differential attention (MD2A).

Each sample is paired with another sample drawn from the same domain and the
two are concatenated on the feature axis.  One attention map is computed for
the signal, a second from the paired projections, and the second is
subtracted (scaled by lambda) so attention patterns shared within a domain,
i.e. domain and modality noise, cancel.  With self-pairing forced this
reduces to plain differential attention; with lambda = 0 it reduces to
vanilla attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core_types import (
    MODALITIES,
    ConfigError,
    EmbeddingBatch,
    ModalityKind,
    NumericError,
    ShapeError,
    ValidationError,
    derive_seed,
)

PAIRING_MODES = ("uniform", "self_only", "distinct_only")


@dataclass
class MD2AConfig:
    """Settings for the attention block (config section: md2a)."""

    n_d: int = 64
    n_heads: int = 4
    lam: float = 0.5
    learnable_lambda: bool = False
    pairing: str = "uniform"
    enabled: bool = True

    def validate(self) -> "MD2AConfig":
        if self.n_heads < 1 or self.n_d % self.n_heads != 0:
            raise ConfigError(
                f"md2a.n_heads={self.n_heads} must divide n_d={self.n_d} exactly"
            )
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"md2a.lambda must be finite and >= 0, got {self.lam}")
        if self.pairing not in PAIRING_MODES:
            raise ConfigError(
                f"md2a.pairing must be one of {PAIRING_MODES}, got {self.pairing!r}"
            )
        return self

    @property
    def d_head(self) -> int:
        return self.n_d // self.n_heads


@dataclass(frozen=True)
class PairedBatch:
    """Feature-axis concatenation of each sample with its same-domain pair."""

    joint_tokens: torch.Tensor    # [B, N_tok, 2*n_d]
    pair_index: torch.Tensor      # [B] int64

    @property
    def n_d(self) -> int:
        return int(self.joint_tokens.shape[-1]) // 2


def batch_reorganize(
    emb: EmbeddingBatch,
    rng_seed: int,
    pairing: str = "uniform",
) -> PairedBatch:
    """Pair every sample with a uniformly chosen sample of the same domain.

    "uniform" draws include the sample itself; "self_only" forces i->i;
    "distinct_only" excludes self unless the domain is a singleton.
    Deterministic given rng_seed.
    """
    if pairing not in PAIRING_MODES:
        raise ConfigError(f"unknown pairing mode {pairing!r}")
    b = emb.batch_size
    by_domain: dict[str, list[int]] = {}
    for i, d in enumerate(emb.domains):
        by_domain.setdefault(d, []).append(i)
    pair = np.arange(b)
    if pairing != "self_only":
        gen = np.random.Generator(np.random.PCG64(derive_seed(rng_seed, "pairing")))
        for i in range(b):
            cands = by_domain[emb.domains[i]]
            if pairing == "distinct_only" and len(cands) > 1:
                cands = [j for j in cands if j != i]
            pair[i] = cands[gen.integers(len(cands))]
    for i in range(b):
        if emb.domains[int(pair[i])] != emb.domains[i]:
            raise ValidationError("pairing crossed domains; this is a bug")
    pair_t = torch.from_numpy(pair).to(torch.int64)
    joint = torch.cat([emb.tokens, emb.tokens[pair_t]], dim=-1)
    return PairedBatch(joint_tokens=joint, pair_index=pair_t)


def md2a_head(
    paired: PairedBatch,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    lam: torch.Tensor | float,
) -> torch.Tensor:
    """One differential-attention head over a paired batch.

    Projects the joint features, splits queries/keys into a signal half and
    a noise half, and returns (softmax(Q K^T s) - lam * softmax(Q' K'^T s)) V
    with s = 1/sqrt(n_d).  Rows of the combined map sum to 1 - lam.
    """
    joint = paired.joint_tokens
    if joint.shape[-1] != w_q.shape[0]:
        raise ShapeError(
            f"joint feature width {joint.shape[-1]} does not match W_q rows {w_q.shape[0]}"
        )
    if not torch.isfinite(joint).all():
        raise NumericError("md2a_head: non-finite input tokens")
    n_d = paired.n_d
    s = 1.0 / math.sqrt(n_d)
    q, q2 = (joint @ w_q).chunk(2, dim=-1)
    k, k2 = (joint @ w_k).chunk(2, dim=-1)
    v = joint @ w_v
    attn = torch.softmax(q @ k.transpose(-1, -2) * s, dim=-1)
    attn_noise = torch.softmax(q2 @ k2.transpose(-1, -2) * s, dim=-1)
    return (attn - lam * attn_noise) @ v


class FeatureBatchNorm(nn.Module):
    """Per-feature batch normalization over (batch x tokens), no affine.

    Training mode uses batch statistics and updates running ones; eval mode
    and single-sample training batches fall back to the running statistics.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(num_features, dtype=torch.float64))
        self.register_buffer("running_var", torch.ones(num_features, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(-1, x.shape[-1])
        if self.training and x.shape[0] > 1:
            mean = flat.mean(dim=0)
            var = flat.var(dim=0, unbiased=False)
            with torch.no_grad():
                n = flat.shape[0]
                unbiased = var.detach() * (n / max(n - 1, 1))
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps)


class MD2AHead(nn.Module):
    """Parameter holder for one head: W_q, W_k [2n_d, 2d], W_v [2n_d, d]."""

    def __init__(self, n_d: int, d_head: int, seed: int):
        super().__init__()
        def init(tag: str, cols: int) -> nn.Parameter:
            gen = torch.Generator().manual_seed(derive_seed(seed, tag))
            w = torch.randn(2 * n_d, cols, generator=gen, dtype=torch.float64)
            return nn.Parameter(w * (2 * n_d) ** -0.5)
        self.w_q = init("w_q", 2 * d_head)
        self.w_k = init("w_k", 2 * d_head)
        self.w_v = init("w_v", d_head)

    def forward(self, paired: PairedBatch, lam: torch.Tensor) -> torch.Tensor:
        return md2a_head(paired, self.w_q, self.w_k, self.w_v, lam)


class MD2ABlock(nn.Module):
    """Multi-head MD2A with batch norm and a residual from the input tokens."""

    def __init__(self, cfg: MD2AConfig, seed: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.heads = nn.ModuleList(
            MD2AHead(cfg.n_d, cfg.d_head, derive_seed(seed, "head", h))
            for h in range(cfg.n_heads)
        )
        self.lam = nn.Parameter(
            torch.tensor(float(cfg.lam), dtype=torch.float64),
            requires_grad=cfg.learnable_lambda,
        )
        self.bn = FeatureBatchNorm(cfg.n_d)

    def forward(self, emb: EmbeddingBatch, rng_seed: int) -> EmbeddingBatch:
        return md2a_block(emb, self, rng_seed)


def md2a_block(emb: EmbeddingBatch, block: MD2ABlock, rng_seed: int) -> EmbeddingBatch:
    """Run the full block: pair, per-head attention, concat, BN, residual."""
    cfg = block.cfg
    if emb.n_d != cfg.n_d:
        raise ShapeError(f"block built for n_d={cfg.n_d}, got {emb.n_d}")
    paired = batch_reorganize(emb, rng_seed, cfg.pairing)
    out = torch.cat([h(paired, block.lam) for h in block.heads], dim=-1)
    out = block.bn(out)
    out = out + paired.joint_tokens[..., : cfg.n_d]
    return EmbeddingBatch.from_tokens(out, emb.labels, emb.domains)


def fuse_modalities(
    per_modality: Mapping[ModalityKind, EmbeddingBatch],
    present: Mapping[ModalityKind, Sequence[bool]] | None = None,
) -> EmbeddingBatch:
    """Concatenate present modalities along the token axis in fixed order.

    Absent modalities simply contribute no tokens, so downstream attention
    runs jointly across whatever modalities exist.  Presence must be uniform
    across the batch for each modality (a modality is either in or out of a
    fused batch); per-sample holes are rejected.
    """
    if not per_modality:
        raise ValidationError("fuse_modalities: no modalities given")
    mods = [m for m in MODALITIES if m in per_modality]
    if present is not None:
        for m in MODALITIES:
            flags = present.get(m)
            if flags is None:
                continue
            flags = [bool(f) for f in flags]
            if any(flags) != all(flags):
                raise ValidationError(
                    f"fuse_modalities: {m.name} present for only part of the batch"
                )
            if m in per_modality and flags and not flags[0]:
                raise ValidationError(
                    f"fuse_modalities: {m.name} marked absent but embeddings given"
                )
        if not mods:
            raise ValidationError("fuse_modalities: every modality absent")
    ref = per_modality[mods[0]]
    for m in mods[1:]:
        e = per_modality[m]
        if e.batch_size != ref.batch_size or e.n_d != ref.n_d:
            raise ShapeError("fuse_modalities: modalities disagree on batch size or width")
        if e.domains != ref.domains or not torch.equal(e.labels, ref.labels):
            raise ValidationError("fuse_modalities: modalities disagree on labels/domains")
    tokens = torch.cat([per_modality[m].tokens for m in mods], dim=1)
    return EmbeddingBatch.from_tokens(tokens, ref.labels, ref.domains)
