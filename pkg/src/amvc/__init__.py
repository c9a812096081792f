"""Adversarially masked video consistency training at desk scale.

Two-stage unsupervised domain adaptation on a synthetic two-domain video
benchmark: stage one pits a U-Net mask generator against a domain-invariant
video encoder through a shared domain head; stage two fine-tunes the encoder
with a masked consistency loss against full-view pseudo-labels.
"""

from .autodiff import GradientTape, Tensor, backward, no_grad
from .models import (
    EncoderConfig,
    MaskField,
    ModelBundle,
    OptimizerSettings,
    UNetConfig,
    apply_mask,
    build_bundle,
    generate_mask,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ClassSpec,
    ClipRecord,
    DomainBatch,
    DomainSpec,
    Manifest,
    batch_iterator,
    default_classes,
    generate_dataset,
    load_clip,
    write_clip,
)
from .objectives import (
    PseudoLabels,
    domain_loss,
    masked_consistency_loss,
    masked_domain_loss,
    mse_consistency_loss,
    pseudo_label,
    supervised_loss,
)
from .optim import AdamW
from .train import (
    EvalReport,
    TrainConfig,
    evaluate,
    stage1_train,
    stage2_train,
    train_source_only,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ClassSpec",
    "ClipRecord",
    "DomainBatch",
    "DomainSpec",
    "EncoderConfig",
    "EvalReport",
    "GradientTape",
    "Manifest",
    "MaskField",
    "ModelBundle",
    "OptimizerSettings",
    "PseudoLabels",
    "Tensor",
    "TrainConfig",
    "UNetConfig",
    "apply_mask",
    "backward",
    "batch_iterator",
    "build_bundle",
    "default_classes",
    "domain_loss",
    "evaluate",
    "generate_dataset",
    "generate_mask",
    "load_checkpoint",
    "load_clip",
    "masked_consistency_loss",
    "masked_domain_loss",
    "mse_consistency_loss",
    "no_grad",
    "pseudo_label",
    "save_checkpoint",
    "stage1_train",
    "stage2_train",
    "supervised_loss",
    "train_source_only",
    "write_clip",
]
