"""Shared domain types, batch assembly, and the raw tensor container.

Everything downstream (encoders, attention, losses, protocols) trades in the
types defined here.  All of them are immutable value objects once built, so
they can be shared freely across threads.
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import torch


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class MMDAError(Exception):
    """Base class for every error this package raises deliberately."""

    code = 1


class ConfigError(MMDAError):
    """Bad or inconsistent configuration (unknown key, wrong type, bad enum)."""

    code = 2


class ValidationError(MMDAError):
    """Input violates a documented invariant (empty batch, bad label, ...)."""

    code = 3


class ShapeError(MMDAError):
    """Tensor dimensions do not match the documented contract."""

    code = 4


class NumericError(MMDAError):
    """Non-finite values or degenerate numerics (zero norms, NaN loss)."""

    code = 5


# ---------------------------------------------------------------------------
# Deterministic seed derivation
# ---------------------------------------------------------------------------

def derive_seed(seed: int, *tags: object) -> int:
    """Derive a stable 63-bit stream seed from a base seed and a tag path.

    Every source of randomness in the package draws from a generator seeded
    this way, so runs are reproducible from a single config seed and no
    global RNG state ever needs to be captured.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


# ---------------------------------------------------------------------------
# Modalities
# ---------------------------------------------------------------------------

class ModalityKind(IntEnum):
    """The three capture modalities, in fixed concatenation order."""

    RGB = 0
    DEPTH = 1
    IR = 2

    @property
    def channels(self) -> int:
        return 3 if self is ModalityKind.RGB else 1

    @property
    def short(self) -> str:
        return {"RGB": "R", "DEPTH": "D", "IR": "I"}[self.name]


MODALITIES: tuple[ModalityKind, ...] = (
    ModalityKind.RGB,
    ModalityKind.DEPTH,
    ModalityKind.IR,
)

LIVE, SPOOF = 1, 0  # liveness convention: y=1 live, y=0 spoof


def modality_from_name(name: str) -> ModalityKind:
    key = name.strip().upper()
    aliases = {"R": "RGB", "D": "DEPTH", "I": "IR"}
    key = aliases.get(key, key)
    try:
        return ModalityKind[key]
    except KeyError:
        raise ConfigError(f"unknown modality name: {name!r}") from None


# ---------------------------------------------------------------------------
# Samples and batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchSample:
    """One multimodal instance: per-modality images plus labels and flags.

    Images are float32 arrays of shape [H, W, C] with values in [0, 1];
    RGB carries 3 channels, DEPTH and IR one each.  `present` flags which
    modalities exist; `images` holds arrays only for present ones.
    """

    sample_id: str
    domain: str
    label: int
    images: Mapping[ModalityKind, np.ndarray]
    present: Mapping[ModalityKind, bool]

    def __post_init__(self) -> None:
        imgs = {ModalityKind(m): a for m, a in self.images.items()}
        for a in imgs.values():
            a.setflags(write=False)
        pres = {m: bool(self.present.get(m, False)) for m in MODALITIES}
        object.__setattr__(self, "images", MappingProxyType(imgs))
        object.__setattr__(self, "present", MappingProxyType(pres))

    @property
    def height(self) -> int:
        return next(iter(self.images.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self.images.values())).shape[1]

    @property
    def present_set(self) -> frozenset[ModalityKind]:
        return frozenset(m for m in MODALITIES if self.present[m])

    def validate(self) -> "BatchSample":
        if self.label not in (LIVE, SPOOF):
            raise ValidationError(
                f"sample {self.sample_id!r}: label must be 0 (spoof) or 1 (live), "
                f"got {self.label}"
            )
        if not any(self.present.values()):
            raise ValidationError(
                f"sample {self.sample_id!r}: at least one modality must be present"
            )
        for m in MODALITIES:
            has_img = m in self.images
            if self.present[m] != has_img:
                raise ValidationError(
                    f"sample {self.sample_id!r}: present[{m.name}] is "
                    f"{self.present[m]} but image is {'set' if has_img else 'missing'}"
                )
        hw = None
        for m, a in self.images.items():
            if a.ndim != 3:
                raise ShapeError(
                    f"sample {self.sample_id!r}: {m.name} image must be rank 3 "
                    f"[H, W, C], got rank {a.ndim}"
                )
            if a.shape[2] != m.channels:
                raise ShapeError(
                    f"sample {self.sample_id!r}: {m.name} expects {m.channels} "
                    f"channels, got {a.shape[2]}"
                )
            if hw is None:
                hw = a.shape[:2]
            elif a.shape[:2] != hw:
                raise ShapeError(
                    f"sample {self.sample_id!r}: modalities disagree on H, W: "
                    f"{a.shape[:2]} vs {hw}"
                )
            if not np.isfinite(a).all():
                raise NumericError(f"sample {self.sample_id!r}: non-finite pixels in {m.name}")
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValidationError(
                    f"sample {self.sample_id!r}: {m.name} pixels outside [0, 1]"
                )
        return self


def make_batch(samples: Sequence[BatchSample]) -> tuple[BatchSample, ...]:
    """Validate a list of samples into a batch.

    Checks shared H, W across the batch, validates every sample, interns
    domain labels, and orders deterministically by sample_id.
    """
    if not samples:
        raise ValidationError("make_batch: empty sample list")
    out = []
    hw = None
    for s in samples:
        s.validate()
        if hw is None:
            hw = (s.height, s.width)
        elif (s.height, s.width) != hw:
            raise ShapeError(
                f"make_batch: mixed image sizes {hw} vs {(s.height, s.width)} "
                f"(sample {s.sample_id!r})"
            )
        out.append(replace(s, domain=sys.intern(s.domain)))
    out.sort(key=lambda s: s.sample_id)
    ids = [s.sample_id for s in out]
    if len(set(ids)) != len(ids):
        raise ValidationError("make_batch: duplicate sample_id")
    return tuple(out)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingBatch:
    """Token embeddings per sample plus the pooled (token-mean) embedding.

    The currency between the encoder, the attention block, the adaptation
    stack and the losses.  `pooled` is always the mean over the token axis.
    """

    tokens: torch.Tensor          # [B, N_tok, n_d]
    pooled: torch.Tensor          # [B, n_d]
    labels: torch.Tensor          # [B] int64
    domains: tuple[str, ...]

    @classmethod
    def from_tokens(
        cls,
        tokens: torch.Tensor,
        labels: torch.Tensor,
        domains: Sequence[str],
    ) -> "EmbeddingBatch":
        if tokens.ndim != 3:
            raise ShapeError(f"tokens must be [B, N_tok, n_d], got shape {tuple(tokens.shape)}")
        return cls(
            tokens=tokens,
            pooled=tokens.mean(dim=1),
            labels=torch.as_tensor(labels, dtype=torch.int64),
            domains=tuple(domains),
        )

    @property
    def batch_size(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def n_d(self) -> int:
        return int(self.tokens.shape[2])

    def validate(self) -> "EmbeddingBatch":
        if self.n_d <= 0:
            raise ShapeError("embedding width must be positive")
        b = self.batch_size
        if self.pooled.shape != (b, self.n_d):
            raise ShapeError(
                f"pooled shape {tuple(self.pooled.shape)} does not match [B={b}, n_d={self.n_d}]"
            )
        if self.labels.shape != (b,) or len(self.domains) != b:
            raise ShapeError("labels/domains length must match batch size")
        err = (self.pooled - self.tokens.mean(dim=1)).abs().max().item()
        if err >= 1e-6:
            raise ValidationError(f"pooled is not the token mean (max dev {err:.3g})")
        return self

    def select(self, idx: Sequence[int] | torch.Tensor) -> "EmbeddingBatch":
        """Row-select a sub-batch (used by the training loop)."""
        idx_t = torch.as_tensor(idx, dtype=torch.int64)
        return EmbeddingBatch(
            tokens=self.tokens[idx_t],
            pooled=self.pooled[idx_t],
            labels=self.labels[idx_t],
            domains=tuple(self.domains[int(i)] for i in idx_t),
        )


# ---------------------------------------------------------------------------
# Captions and the text-built representation space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaptionSet:
    """Live/spoof caption strings defining the representation space."""

    live_captions: tuple[str, ...]
    spoof_captions: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "live_captions", tuple(self.live_captions))
        object.__setattr__(self, "spoof_captions", tuple(self.spoof_captions))

    def validate(self) -> "CaptionSet":
        if not self.live_captions or not self.spoof_captions:
            raise ValidationError("caption set needs at least one live and one spoof caption")
        for c in self.live_captions + self.spoof_captions:
            if not c.strip():
                raise ValidationError("empty caption string")
        return self


@dataclass(frozen=True)
class TextSpace:
    """Frozen text embeddings spanning the generalized representation space."""

    embeddings: torch.Tensor      # [M, n_d]
    class_of: torch.Tensor        # [M], 1 live / 0 spoof

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    def validate(self) -> "TextSpace":
        if self.embeddings.ndim != 2:
            raise ShapeError("text embeddings must be [M, n_d]")
        if self.class_of.shape != (self.size,):
            raise ShapeError("class_of length must match embedding rows")
        if not torch.isfinite(self.embeddings).all():
            raise NumericError("non-finite text embedding")
        present = set(self.class_of.tolist())
        if not {0, 1} <= present:
            raise ValidationError("text space must contain both classes")
        return self

    def rows_of_class(self, label: int) -> torch.Tensor:
        return self.embeddings[self.class_of == int(label)]


# ---------------------------------------------------------------------------
# Raw tensor container
# ---------------------------------------------------------------------------
# Layout: magic "MMDA" | u8 rank | u8 dtype tag | u16 reserved |
#         rank x u32 dims | payload, everything little-endian.
# Dtype tags: 0 = float32, 1 = float64.

_MAGIC = b"MMDA"
_TAG_OF_DTYPE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPE_OF_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if not a.flags.c_contiguous:
        a = np.copy(a, order="C")
    dt = a.dtype.newbyteorder("<")
    if dt not in _TAG_OF_DTYPE:
        raise ValidationError(f"unsupported tensor dtype {arr.dtype}")
    if a.ndim > 255:
        raise ShapeError(f"tensor rank {a.ndim} exceeds 255")
    head = struct.pack("<4sBBH", _MAGIC, a.ndim, _TAG_OF_DTYPE[dt], 0)
    dims = struct.pack(f"<{a.ndim}I", *a.shape)
    return head + dims + a.astype(dt, copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor; returns (array, offset past the payload)."""
    magic, rank, tag, _ = struct.unpack_from("<4sBBH", buf, offset)
    if magic != _MAGIC:
        raise ValidationError("bad tensor magic; not an MMDA tensor blob")
    if tag not in _DTYPE_OF_TAG:
        raise ValidationError(f"unknown tensor dtype tag {tag}")
    offset += 8
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dt = _DTYPE_OF_TAG[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * dt.itemsize
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(dims)
    return arr.copy(), offset + nbytes


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


# ---------------------------------------------------------------------------
# Batch (de)serialization: manifest directory
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "mmda-manifest-v1"


def canonical_json(obj: object) -> str:
    """Canonical JSON used everywhere hashes or byte-stability matter."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_batch(
    samples: Sequence[BatchSample],
    out_dir: str | Path,
    config_hash: str = "",
) -> Path:
    """Write samples as a manifest directory; returns the manifest path.

    Layout: <out_dir>/manifest.json plus one raw tensor file per present
    modality under <out_dir>/tensors/.  Images are stored as float32 and
    round-trip bit-exactly.
    """
    batch = make_batch(samples)
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in batch:
        paths = {}
        for m in MODALITIES:
            if not s.present[m]:
                continue
            rel = f"tensors/{s.sample_id}_{m.name}.mmda"
            write_tensor(out / rel, s.images[m].astype(np.float32, copy=False))
            paths[m.name] = rel
        entries.append(
            {
                "sample_id": s.sample_id,
                "domain": s.domain,
                "label": s.label,
                "present": {m.name: s.present[m] for m in MODALITIES},
                "images": paths,
            }
        )
    manifest = {
        "format": _MANIFEST_FORMAT,
        "config_hash": config_hash,
        "samples": entries,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_batch(manifest_path: str | Path) -> tuple[BatchSample, ...]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}") from None
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise ValidationError(f"{path}: not an MMDA manifest")
    base = path.parent
    samples = []
    for e in manifest["samples"]:
        images = {
            modality_from_name(name): read_tensor(base / rel)
            for name, rel in e["images"].items()
        }
        samples.append(
            BatchSample(
                sample_id=e["sample_id"],
                domain=e["domain"],
                label=int(e["label"]),
                images=images,
                present={modality_from_name(k): v for k, v in e["present"].items()},
            )
        )
    return make_batch(samples)


def manifest_config_hash(manifest_path: str | Path) -> str:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return str(json.loads(path.read_text()).get("config_hash", ""))
