"""Frozen toy visual and text encoders.

Stand-ins for a large pretrained vision-language backbone: a per-modality
patch projection with positional embeddings on the visual side, and a hashed
character-trigram projection on the text side.  All parameters are generated
deterministically from a seed and never receive gradient updates.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import torch

from .core_types import (
    MODALITIES,
    BatchSample,
    CaptionSet,
    EmbeddingBatch,
    ModalityKind,
    NumericError,
    ShapeError,
    TextSpace,
    ValidationError,
    derive_seed,
    tensor_to_bytes,
)

_LN_EPS = 1e-6
_NORM_EPS = 1e-12

# Default caption pools; a caption file can replace them (see load_captions).
DEFAULT_CAPTIONS = CaptionSet(
    live_captions=(
        "a photo of a real live human face",
        "a genuine face captured by the sensor",
        "a bona fide person in front of the camera",
        "an authentic living face with natural depth",
        "a real person with warm facial temperature",
        "a true face image of a living subject",
    ),
    spoof_captions=(
        "a printed photo of a face held to the camera",
        "a face replayed on a flat screen",
        "a paper cutout imitating a face",
        "a 3d mask worn to impersonate a face",
        "a spoof attack with no body heat",
        "a flat fake face without real depth",
    ),
)


@dataclass(frozen=True)
class FrozenEncoderParams:
    """Frozen encoder weights, generated deterministically from `seed`."""

    seed: int
    image_size: int
    patch: int
    n_d: int
    v_hash: int
    patch_proj: Mapping[ModalityKind, torch.Tensor]   # [P*P*C, n_d] each
    pos_embed: torch.Tensor                           # [N_tok, n_d]
    text_hash_proj: torch.Tensor                      # [V_hash, n_d]

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch_proj", MappingProxyType(dict(self.patch_proj)))

    @property
    def n_tokens(self) -> int:
        g = self.image_size // self.patch
        return g * g + 1

    def state_bytes(self) -> bytes:
        """Serialized weights, used to assert frozen-ness across training."""
        parts = [tensor_to_bytes(self.patch_proj[m].numpy()) for m in MODALITIES]
        parts.append(tensor_to_bytes(self.pos_embed.numpy()))
        parts.append(tensor_to_bytes(self.text_hash_proj.numpy()))
        return b"".join(parts)


def _randn(seed: int, shape: tuple[int, ...], scale: float = 1.0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(shape, generator=gen, dtype=torch.float64) * scale
    t.requires_grad_(False)
    return t


def frozen_encoder(
    seed: int,
    image_size: int = 32,
    patch: int = 8,
    n_d: int = 64,
    v_hash: int = 2048,
) -> FrozenEncoderParams:
    """Build the frozen encoder for a given geometry."""
    if image_size % patch != 0:
        raise ShapeError(f"image size {image_size} not divisible by patch {patch}")
    grid = image_size // patch
    n_tok = grid * grid + 1
    proj = {}
    for m in MODALITIES:
        fan_in = patch * patch * m.channels
        proj[m] = _randn(derive_seed(seed, "patch_proj", m.name), (fan_in, n_d), fan_in ** -0.5)
    return FrozenEncoderParams(
        seed=seed,
        image_size=image_size,
        patch=patch,
        n_d=n_d,
        v_hash=v_hash,
        patch_proj=proj,
        pos_embed=_randn(derive_seed(seed, "pos_embed"), (n_tok, n_d)),
        text_hash_proj=_randn(derive_seed(seed, "text_hash_proj"), (v_hash, n_d)),
    )


def _normalize_tokens(t: torch.Tensor) -> torch.Tensor:
    # layer normalization over features, then exact unit L2 norm per token
    t = (t - t.mean(dim=-1, keepdim=True)) / torch.sqrt(
        t.var(dim=-1, unbiased=False, keepdim=True) + _LN_EPS
    )
    return t / t.norm(dim=-1, keepdim=True).clamp_min(_NORM_EPS)


def encode_visual(
    batch: Sequence[BatchSample],
    modality: ModalityKind,
    params: FrozenEncoderParams,
) -> EmbeddingBatch:
    """Embed one modality of every sample into unit-norm tokens.

    Tokens are the patch projections plus positional embeddings with one
    prepended embedding token, so N_tok = (H/P)*(W/P) + 1.  The projection
    has no bias: a zero image yields exactly the normalized positional table.
    """
    if not batch:
        raise ValidationError("encode_visual: empty batch")
    for s in batch:
        if not s.present[modality]:
            raise ValidationError(
                f"encode_visual: sample {s.sample_id!r} is missing {modality.name}"
            )
    imgs = np.stack([np.asarray(s.images[modality], dtype=np.float64) for s in batch])
    b, h, w, c = imgs.shape
    p = params.patch
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n_patches = gh * gw
    if n_patches + 1 != params.pos_embed.shape[0]:
        raise ShapeError(
            f"encoder built for {params.n_tokens} tokens but input yields {n_patches + 1}"
        )
    x = torch.from_numpy(imgs)
    # [B, gh, P, gw, P, C] -> [B, gh*gw, P*P*C]
    x = x.reshape(b, gh, p, gw, p, c).permute(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, n_patches, p * p * c)
    tok = x @ params.patch_proj[modality]
    cls = torch.zeros(b, 1, params.n_d, dtype=torch.float64)
    tok = torch.cat([cls, tok], dim=1) + params.pos_embed
    tok = _normalize_tokens(tok)
    labels = torch.tensor([s.label for s in batch], dtype=torch.int64)
    return EmbeddingBatch.from_tokens(tok, labels, [s.domain for s in batch])


def _trigram_counts(caption: str, v_hash: int) -> np.ndarray:
    # STX/ETX sentinels guarantee at least one trigram for any non-empty text
    padded = "\x02" + caption + "\x03"
    counts = np.zeros(v_hash, dtype=np.float64)
    for i in range(len(padded) - 2):
        tri = padded[i : i + 3]
        counts[zlib.crc32(tri.encode("utf-8")) % v_hash] += 1.0
    return counts


def encode_text(captions: CaptionSet, params: FrozenEncoderParams) -> TextSpace:
    """Embed captions via hashed character trigrams and a frozen projection.

    Rows are unit-normalized; live captions come first and are labeled 1,
    spoof captions follow labeled 0.
    """
    captions.validate()
    ordered = [(c, 1) for c in captions.live_captions] + [
        (c, 0) for c in captions.spoof_captions
    ]
    rows = []
    for text, _ in ordered:
        if not text.strip():
            raise ValidationError("empty caption string")
        counts = torch.from_numpy(_trigram_counts(text, params.v_hash))
        e = counts @ params.text_hash_proj
        norm = e.norm()
        if norm < _NORM_EPS:
            raise NumericError(f"caption {text!r} hashed to a zero embedding")
        rows.append(e / norm)
    return TextSpace(
        embeddings=torch.stack(rows),
        class_of=torch.tensor([y for _, y in ordered], dtype=torch.int64),
    ).validate()


def load_captions(path: str | Path) -> CaptionSet:
    """Read a caption file: one caption per line, prefixed "live:" or "spoof:"."""
    live, spoof = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        prefix, _, text = line.partition(":")
        text = text.strip()
        if prefix.strip() == "live" and text:
            live.append(text)
        elif prefix.strip() == "spoof" and text:
            spoof.append(text)
        else:
            raise ValidationError(
                f"{path}:{lineno}: expected 'live: <caption>' or 'spoof: <caption>'"
            )
    return CaptionSet(tuple(live), tuple(spoof)).validate()
