"""End-to-end optimization loop and checkpointing.

Wires frozen encoders -> modality fusion -> MD2A -> U-DSA -> per-layer RS2
loss, with a hand-rolled decoupled-weight-decay Adam so optimizer state can
live in the package's own checkpoint container and resuming reproduces an
uninterrupted run bit-for-bit.  All randomness is drawn from streams derived
from (seed, epoch, step), never from global RNG state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import FrozenEncoderParams, encode_text, encode_visual
from .core_types import (
    MODALITIES,
    BatchSample,
    CaptionSet,
    ConfigError,
    EmbeddingBatch,
    ModalityKind,
    NumericError,
    TextSpace,
    ValidationError,
    derive_seed,
    tensor_from_bytes,
    tensor_to_bytes,
)
from .md2a import MD2ABlock, MD2AConfig, fuse_modalities
from .metrics import ScoreRecord
from .rs2 import RS2Config, RS2Loss, TextConstrainedClassifier
from .synthdata import apply_missing_mask
from .udsa import UDSAConfig, UDSAStack, per_layer_rs2

_EVAL_SEED = 0x5EED  # fixed base for eval-time pairing; no eval randomness


@dataclass
class TrainConfig:
    """Optimization settings (config section: train)."""

    lr: float = 5e-6
    weight_decay: float = 1e-3
    epochs: int = 80
    batch_size: int = 24
    seed: int = 0
    optimizer: str = "adamw"
    grad_clip: float = 1.0      # global-norm clip; 0 disables

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.optimizer != "adamw":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("train.weight_decay and train.grad_clip must be >= 0")
        return self


class MMDAModel(nn.Module):
    """Frozen encoders plus the trainable denoising/adaptation stack.

    The frozen encoder and the text space are plain tensors, not module
    parameters, so no optimizer can ever touch them.
    """

    def __init__(
        self,
        encoder: FrozenEncoderParams,
        captions: CaptionSet,
        md2a_cfg: MD2AConfig,
        udsa_cfg: UDSAConfig,
        rs2_cfg: RS2Config,
        seed: int,
    ):
        super().__init__()
        if md2a_cfg.n_d != encoder.n_d or udsa_cfg.n_d != encoder.n_d:
            raise ConfigError("md2a/udsa width must match the encoder width")
        self.encoder = encoder
        self.captions = captions
        self.text_space: TextSpace = encode_text(captions, encoder)
        self.md2a_cfg = md2a_cfg.validate()
        self.rs2_cfg = rs2_cfg.validate()
        self.md2a = MD2ABlock(md2a_cfg, derive_seed(seed, "md2a")) if md2a_cfg.enabled else None
        self.udsa = UDSAStack(udsa_cfg, derive_seed(seed, "udsa"))
        self.classifier = TextConstrainedClassifier(encoder.n_d, derive_seed(seed, "clf"))

    @property
    def depth(self) -> int:
        return self.udsa.depth

    def embed_samples(self, samples: Sequence[BatchSample]) -> EmbeddingBatch:
        """Encode every present modality and fuse along the token axis."""
        if not samples:
            raise ValidationError("embed_samples: empty batch")
        mask = samples[0].present_set
        for s in samples:
            if s.present_set != mask:
                raise ValidationError(
                    "embed_samples: modality availability differs within the batch"
                )
        with torch.no_grad():
            per_mod = {m: encode_visual(samples, m, self.encoder) for m in sorted(mask)}
            present = {m: [s.present[m] for s in samples] for m in MODALITIES}
            return fuse_modalities(per_mod, present)

    def forward_features(self, emb: EmbeddingBatch, rng_seed: int) -> list[torch.Tensor]:
        """Denoise (if enabled) and run the U-shaped stack on the pooled embedding."""
        if self.md2a is not None:
            emb = self.md2a(emb, rng_seed)
        return self.udsa(emb.pooled)

    def loss_on(self, emb: EmbeddingBatch, rng_seed: int) -> RS2Loss:
        vprimes = self.forward_features(emb, rng_seed)
        return per_layer_rs2(
            vprimes, self.text_space, self.classifier, self.rs2_cfg,
            emb.labels, emb.domains,
        )

    def scores_at_layers(self, emb: EmbeddingBatch, rng_seed: int) -> torch.Tensor:
        """Spoof probabilities for every layer output; shape [depth+1, B]."""
        with torch.no_grad():
            vprimes = self.forward_features(emb, rng_seed)
            return torch.stack([self.classifier.spoof_prob(v) for v in vprimes])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta), with
    bias-corrected first/second moment estimates, betas (0.9, 0.999) and
    eps 1e-8.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, nn.Parameter]],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.named = list(named_params)
        if not self.named:
            raise ConfigError("optimizer got an empty parameter list")
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.named}
        self.v = {n: torch.zeros_like(p) for n, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.named:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / c1) / ((v / c2).sqrt() + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p.add_(update, alpha=-self.lr)


def clip_global_norm(params: Sequence[tuple[str, nn.Parameter]], max_norm: float) -> float:
    grads = [p.grad for _, p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g ** 2).sum() for g in grads))
    if total > max_norm:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return float(total)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepLoss:
    step: int
    epoch: int
    total: float
    l_cls: float
    l_align: float


@dataclass
class TrainResult:
    history: list[StepLoss]
    steps: int
    epochs_done: int


def trainable_parameters(model: MMDAModel) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def train(
    model: MMDAModel,
    samples: Sequence[BatchSample],
    cfg: TrainConfig,
    *,
    start_epoch: int = 0,
    start_step: int = 0,
    optimizer: AdamW | None = None,
    on_epoch=None,
) -> tuple[TrainResult, AdamW]:
    """Optimize the per-layer RS2 loss; returns step history and the optimizer.

    Epoch ordering and pairing seeds derive from (cfg.seed, epoch, step), so
    a run resumed from a checkpoint at an epoch boundary continues exactly
    as the uninterrupted run would have.  `on_epoch(epochs_done, step,
    history)` fires after every epoch, e.g. to write checkpoints.
    """
    cfg.validate()
    if not samples:
        raise ValidationError("train: empty dataset")
    fused = model.embed_samples(sorted(samples, key=lambda s: s.sample_id))
    params = trainable_parameters(model)
    opt = optimizer or AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[StepLoss] = []
    n = fused.batch_size
    step = start_step
    for epoch in range(start_epoch, cfg.epochs):
        order_gen = np.random.Generator(
            np.random.PCG64(derive_seed(cfg.seed, "order", epoch))
        )
        perm = order_gen.permutation(n)
        model.train()
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo : lo + cfg.batch_size]
            sub = fused.select(idx)
            loss = model.loss_on(sub, derive_seed(cfg.seed, "pair", epoch, bi))
            if not torch.isfinite(loss.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}: total={loss.total}"
                )
            opt.zero_grad()
            loss.total.backward()
            if cfg.grad_clip > 0:
                clip_global_norm(params, cfg.grad_clip)
            opt.step()
            history.append(
                StepLoss(
                    step, epoch,
                    float(loss.total.detach()), float(loss.l_cls.detach()),
                    float(loss.l_align.detach()),
                )
            )
            step += 1
        if on_epoch is not None:
            on_epoch(epoch + 1, step, history)
    model.eval()
    return TrainResult(history=history, steps=step, epochs_done=max(cfg.epochs, start_epoch)), opt


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_layers(
    model: MMDAModel,
    samples: Sequence[BatchSample],
    missing: Sequence[ModalityKind] = (),
    batch_size: int = 64,
) -> list[list[ScoreRecord]]:
    """Score every sample at every layer; returns per-layer record lists.

    Eval mode throughout: batch-norm running statistics, and a fixed pairing
    seed per chunk so results do not depend on when evaluation happens.
    """
    if not samples:
        raise ValidationError("evaluate: empty dataset")
    masked = apply_missing_mask(sorted(samples, key=lambda s: s.sample_id), missing)
    model.eval()
    per_layer: list[list[ScoreRecord]] = [[] for _ in range(model.depth + 1)]
    for ci, lo in enumerate(range(0, len(masked), batch_size)):
        chunk = masked[lo : lo + batch_size]
        emb = model.embed_samples(chunk)
        scores = model.scores_at_layers(emb, derive_seed(_EVAL_SEED, "eval", ci))
        for li in range(model.depth + 1):
            for s, p in zip(chunk, scores[li].tolist()):
                per_layer[li].append(
                    ScoreRecord(
                        score=min(max(p, 0.0), 1.0),
                        label=s.label,
                        domain=s.domain,
                        modality_mask=s.present_set,
                    )
                )
    return per_layer


def evaluate(
    model: MMDAModel,
    samples: Sequence[BatchSample],
    missing: Sequence[ModalityKind] = (),
    exit_layer: int = 0,
    batch_size: int = 64,
) -> list[ScoreRecord]:
    """Score samples at one exit layer (spoof probability per sample)."""
    if not 0 <= exit_layer <= model.depth:
        raise ValidationError(
            f"exit layer {exit_layer} outside [0, {model.depth}]"
        )
    return evaluate_layers(model, samples, missing, batch_size)[exit_layer]


# ---------------------------------------------------------------------------
# Checkpoint container: 8-byte magic, u32 header length, canonical JSON
# header, then the named tensors in the header's listed order.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MMDACKP1"


def checkpoint_bytes(
    model: MMDAModel,
    opt: AdamW | None,
    *,
    config_hash: str,
    seed: int,
    epoch: int,
    step: int,
    extra: Mapping | None = None,
) -> bytes:
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t.detach().numpy()
    header: dict = {
        "format": "mmda-checkpoint-v1",
        "config_hash": config_hash,
        "epoch": epoch,
        "step": step,
        "rng": {"scheme": "derived", "seed": seed, "next_epoch": epoch},
        "adamw_t": opt.t if opt else 0,
    }
    if extra:
        header.update(extra)
    if opt:
        for name, _ in opt.named:
            tensors[f"adamw.m.{name}"] = opt.m[name].detach().numpy()
            tensors[f"adamw.v.{name}"] = opt.v[name].detach().numpy()
    names = sorted(tensors)
    header["tensors"] = names
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = [_CKPT_MAGIC, struct.pack("<I", len(head)), head]
    blob += [tensor_to_bytes(tensors[n]) for n in names]
    return b"".join(blob)


def save_checkpoint(path: str | Path, *args, **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(*args, **kwargs))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not an MMDA checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12 : 12 + hlen].decode())
    offset = 12 + hlen
    tensors = {}
    for name in header["tensors"]:
        arr, offset = tensor_from_bytes(buf, offset)
        tensors[name] = arr
    return header, tensors


def apply_checkpoint(
    model: MMDAModel,
    tensors: Mapping[str, np.ndarray],
    opt: AdamW | None = None,
    adamw_t: int = 0,
) -> None:
    """Load tensors into the model (and optimizer) in place."""
    state = model.state_dict()
    for name, t in state.items():
        key = f"model.{name}"
        if key not in tensors:
            raise ValidationError(f"checkpoint missing tensor {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise ValidationError(
                f"checkpoint tensor {key} has shape {arr.shape}, expected {tuple(t.shape)}"
            )
        with torch.no_grad():
            t.copy_(torch.from_numpy(arr.copy()))
    if opt is not None:
        opt.t = adamw_t
        for name, _ in opt.named:
            for slot, store in (("m", opt.m), ("v", opt.v)):
                key = f"adamw.{slot}.{name}"
                if key not in tensors:
                    raise ValidationError(f"checkpoint missing optimizer tensor {key}")
                with torch.no_grad():
                    store[name].copy_(torch.from_numpy(tensors[key].copy()))
