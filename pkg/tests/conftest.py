"""Shared builders for end-to-end tests: tiny datasets and models."""

from mmda.backbone import DEFAULT_CAPTIONS, frozen_encoder
from mmda.md2a import MD2AConfig
from mmda.rs2 import RS2Config
from mmda.synthdata import DomainSpec, GeneratorConfig, generate_domain
from mmda.trainer import MMDAModel
from mmda.udsa import UDSAConfig


def tiny_domains(seed=0, n_domains=4, shift=0.25, noise=0.03):
    """Domains with strong low-frequency bias fields and mild noise."""
    names = ["W-like", "C-like", "P-like", "S-like"][:n_domains]
    gains = [(1.0, 1.0, 1.0), (0.95, 1.06, 0.94), (1.06, 0.92, 1.08), (0.9, 1.1, 1.02)]
    return tuple(
        DomainSpec(
            name=name,
            shift_vector=(shift, shift * 0.8, shift * 1.1),
            noise_sigma=noise,
            sensor_gain=gains[i],
            seed=seed * 1000 + i,
        )
        for i, name in enumerate(names)
    )


def tiny_datasets(seed=0, n=12, image=16, strength=1.0, n_domains=4, shift=0.25,
                  noise=0.03, mod_noise=(0.02, 0.02, 0.02)):
    cfg = GeneratorConfig(
        n_live=n, n_spoof=n, image_size=image,
        spoof_signature_strength=strength, modality_noise_sigma=mod_noise,
    )
    return {
        spec.name: generate_domain(spec, cfg)
        for spec in tiny_domains(seed, n_domains, shift, noise)
    }


def tiny_model(
    seed=0,
    n_d=32,
    image=16,
    patch=8,
    depth=2,
    lam=0.5,
    pairing="uniform",
    md2a_enabled=True,
    variant="rs2",
    adapter_kind="dense",
    n_experts=3,
    top_k=2,
    learnable_lambda=False,
    captions=DEFAULT_CAPTIONS,
):
    enc = frozen_encoder(seed=seed + 17, image_size=image, patch=patch, n_d=n_d)
    return MMDAModel(
        encoder=enc,
        captions=captions,
        md2a_cfg=MD2AConfig(
            n_d=n_d, n_heads=4, lam=lam, pairing=pairing,
            enabled=md2a_enabled, learnable_lambda=learnable_lambda,
        ),
        udsa_cfg=UDSAConfig(
            n_d=n_d, depth=depth, adapter_kind=adapter_kind,
            n_experts=n_experts, top_k=top_k,
        ),
        rs2_cfg=RS2Config(label_smoothing=0.1, alignment_variant=variant),
        seed=seed,
    )
