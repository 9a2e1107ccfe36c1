"""Synthetic multimodal face-anti-spoofing data with controllable noise.

Procedural stand-in for real capture datasets: each sample is a smooth
face-like blob rendered into RGB, a depth map, and an infrared map.  Live
faces get a curved depth dome and warm IR blobs; spoofs get near-planar
depth, attenuated IR, and a faint RGB cast, all scaled by
spoof_signature_strength (0 makes the classes indistinguishable).  Domains
add a fixed low-frequency bias field per modality, a sensor gain, and
Gaussian noise, modeling domain shift; per-modality noise models modality
bias.  Everything derives from (seed, sample_id), so generation is a pure
function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core_types import (
    MODALITIES,
    BatchSample,
    ConfigError,
    ModalityKind,
    ValidationError,
    derive_seed,
    make_batch,
)


@dataclass(frozen=True)
class DomainSpec:
    """One capture setup: bias field amplitudes, gains, and noise level."""

    name: str
    shift_vector: tuple[float, float, float]    # additive bias per modality
    noise_sigma: float
    sensor_gain: tuple[float, float, float]     # multiplicative per modality
    seed: int

    def validate(self) -> "DomainSpec":
        if not self.name:
            raise ConfigError("domain name must be non-empty")
        if not 0.0 <= self.noise_sigma < 1.0:
            raise ConfigError(f"noise_sigma must lie in [0, 1), got {self.noise_sigma}")
        if len(self.shift_vector) != 3 or len(self.sensor_gain) != 3:
            raise ConfigError("shift_vector and sensor_gain need one entry per modality")
        if any(g <= 0 for g in self.sensor_gain):
            raise ConfigError("sensor_gain entries must be positive")
        return self


@dataclass(frozen=True)
class GeneratorConfig:
    """Dataset-level knobs shared by every domain."""

    n_live: int = 40
    n_spoof: int = 40
    image_size: int = 32
    spoof_signature_strength: float = 1.0
    modality_noise_sigma: tuple[float, float, float] = (0.02, 0.02, 0.02)

    def validate(self) -> "GeneratorConfig":
        if self.n_live < 1 or self.n_spoof < 1:
            raise ConfigError("need at least one live and one spoof sample per domain")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if self.spoof_signature_strength < 0:
            raise ConfigError("spoof_signature_strength must be >= 0")
        if len(self.modality_noise_sigma) != 3:
            raise ConfigError("modality_noise_sigma needs one entry per modality")
        return self


def default_domains(seed: int) -> tuple[DomainSpec, ...]:
    """Four named domains with distinct shift fields, gains, and noise."""
    presets = [
        ("W-like", (0.10, 0.08, 0.12), 0.020, (1.00, 1.00, 1.00)),
        ("C-like", (0.14, 0.10, 0.08), 0.030, (0.95, 1.06, 0.94)),
        ("P-like", (0.08, 0.12, 0.10), 0.025, (1.06, 0.92, 1.08)),
        ("S-like", (0.12, 0.14, 0.14), 0.035, (0.90, 1.10, 1.02)),
    ]
    return tuple(
        DomainSpec(
            name=name,
            shift_vector=shift,
            noise_sigma=noise,
            sensor_gain=gain,
            seed=derive_seed(seed, "domain", name),
        ).validate()
        for name, shift, noise, gain in presets
    )


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(ax, ax, indexing="xy")


def _domain_fields(spec: DomainSpec, size: int) -> dict[ModalityKind, np.ndarray]:
    """Fixed low-frequency bias field per modality, shared by all samples."""
    xx, yy = _grid(size)
    fields = {}
    for m in MODALITIES:
        gen = np.random.Generator(np.random.PCG64(derive_seed(spec.seed, "field", m.name)))
        fx, fy = gen.uniform(0.3, 0.9, size=2)
        phase = gen.uniform(0.0, 2.0 * np.pi)
        fields[m] = np.cos(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    return fields


def _render_sample(
    gen: np.random.Generator,
    size: int,
    label: int,
    strength: float,
) -> dict[ModalityKind, np.ndarray]:
    """Draw one clean face; spoof cues are scaled by `strength`.

    Live and spoof share the identical generative path and draw order, so
    at strength 0 the two classes have exactly the same distribution.
    """
    xx, yy = _grid(size)
    cx, cy = gen.uniform(-0.15, 0.15, size=2)
    radius = gen.uniform(0.55, 0.80)
    rho2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / radius ** 2
    face = np.exp(-rho2 * 1.8)

    # RGB: skin tone under a soft face mask, low-frequency texture, eye blobs
    tone = gen.uniform(0.45, 0.70, size=3)
    fx, fy = gen.uniform(0.5, 1.5, size=2)
    phase = gen.uniform(0.0, 2.0 * np.pi)
    texture = 0.06 * np.cos(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    eyes = np.zeros_like(xx)
    for sx in (-1.0, 1.0):
        ex, ey = cx + sx * 0.30 * radius, cy - 0.18 * radius
        eyes += np.exp(-(((xx - ex) ** 2 + (yy - ey) ** 2) / 0.012))
    rgb = np.stack(
        [0.22 + face * (t + texture) - 0.20 * eyes for t in tone], axis=-1
    )

    # DEPTH: curved dome for live, blended toward a tilted plane for spoof
    dome = 0.30 * np.sqrt(np.clip(1.0 - rho2, 0.0, None))
    tilt = 0.04 * (gen.uniform(-1, 1) * xx + gen.uniform(-1, 1) * yy)
    s = strength if label == 0 else 0.0
    depth = 0.25 + tilt + (1.0 - s) * dome + s * 0.05 * face
    depth = depth[..., None]

    # IR: warm core plus eye hotspots; spoofs are attenuated and cooler
    warm = 0.28 + 0.50 * np.exp(-rho2 * 1.2) + 0.15 * eyes
    ir = (1.0 - 0.65 * s) * warm + 0.08 * s
    ir = ir[..., None]

    # weak RGB spoof cue: contrast flattening with a gray cast
    rgb = (1.0 - 0.12 * s) * rgb + 0.06 * s

    return {ModalityKind.RGB: rgb, ModalityKind.DEPTH: depth, ModalityKind.IR: ir}


def generate_domain(spec: DomainSpec, cfg: GeneratorConfig) -> tuple[BatchSample, ...]:
    """Generate one domain's worth of samples, deterministically."""
    spec.validate()
    cfg.validate()
    fields = _domain_fields(spec, cfg.image_size)
    samples = []
    counts = {1: cfg.n_live, 0: cfg.n_spoof}
    for label, n in counts.items():
        kind = "live" if label == 1 else "spoof"
        for k in range(n):
            sample_id = f"{spec.name}-{kind}-{k:04d}"
            gen = np.random.Generator(
                np.random.PCG64(derive_seed(spec.seed, "sample", sample_id))
            )
            clean = _render_sample(gen, cfg.image_size, label, cfg.spoof_signature_strength)
            images = {}
            for mi, m in enumerate(MODALITIES):
                img = clean[m] * spec.sensor_gain[mi]
                img = img + spec.shift_vector[mi] * fields[m][..., None]
                img = img + gen.normal(0.0, 1.0, img.shape) * spec.noise_sigma
                img = img + gen.normal(0.0, 1.0, img.shape) * cfg.modality_noise_sigma[mi]
                images[m] = np.clip(img, 0.0, 1.0).astype(np.float32)
            samples.append(
                BatchSample(
                    sample_id=sample_id,
                    domain=spec.name,
                    label=label,
                    images=images,
                    present={m: True for m in MODALITIES},
                )
            )
    return make_batch(samples)


def apply_missing_mask(
    samples: Sequence[BatchSample],
    missing: Sequence[ModalityKind] | frozenset[ModalityKind],
) -> tuple[BatchSample, ...]:
    """Clear the present flags for `missing` and drop those image tensors."""
    missing_set = {ModalityKind(m) for m in missing}
    if missing_set >= set(MODALITIES):
        raise ValidationError("cannot mask out all three modalities")
    if not missing_set:
        return tuple(samples)
    out = []
    for s in samples:
        images = {m: a for m, a in s.images.items() if m not in missing_set}
        present = {m: (s.present[m] and m not in missing_set) for m in MODALITIES}
        out.append(replace(s, images=images, present=present))
    return tuple(out)
