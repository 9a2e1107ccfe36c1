"""Multimodal face anti-spoofing with denoising attention and soft alignment.

Desk-scale, fully deterministic reference implementation: frozen toy
encoders, modality-domain joint differential attention (MD2A), soft
text-space alignment losses (RS2), a U-shaped dual-space adaptation stack
(U-DSA), a synthetic multimodal data generator, and a cross-domain protocol
harness with HTER/AUC metrics.
"""

from .backbone import (
    DEFAULT_CAPTIONS,
    FrozenEncoderParams,
    encode_text,
    encode_visual,
    frozen_encoder,
    load_captions,
)
from .core_types import (
    LIVE,
    MODALITIES,
    SPOOF,
    BatchSample,
    CaptionSet,
    ConfigError,
    EmbeddingBatch,
    MMDAError,
    ModalityKind,
    NumericError,
    ShapeError,
    TextSpace,
    ValidationError,
    derive_seed,
    load_batch,
    make_batch,
    read_tensor,
    save_batch,
    write_tensor,
)
from .md2a import (
    MD2ABlock,
    MD2AConfig,
    PairedBatch,
    batch_reorganize,
    fuse_modalities,
    md2a_block,
    md2a_head,
)
from .metrics import ScoreRecord, auc, eer_threshold, far_frr, hter
from .protocol_eval import ProtocolConfig, ProtocolReport, run_protocol, split_dev
from .rs2 import (
    RS2Config,
    RS2Loss,
    TextConstrainedClassifier,
    alignment_loss,
    classification_loss,
    min_cosine_distance,
    rs2_loss,
)
from .synthdata import (
    DomainSpec,
    GeneratorConfig,
    apply_missing_mask,
    default_domains,
    generate_domain,
)
from .trainer import (
    AdamW,
    MMDAModel,
    TrainConfig,
    apply_checkpoint,
    evaluate,
    evaluate_layers,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .udsa import (
    MoEAdapter,
    SquareMLP,
    UDSAConfig,
    UDSAStack,
    moe_adapt,
    per_layer_rs2,
    select_exit_layer,
    udsa_forward,
)

__version__ = "0.1.0"
