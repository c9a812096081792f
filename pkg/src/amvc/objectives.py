"""Loss functions and the pseudo-labeling rule.

All losses reduce with the batch mean and are non-negative. The domain losses
are binary cross-entropy over the domain head's logit, computed in stable
logit form; the consistency losses compare masked-view predictions against
quantities derived from the full view under gradient isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NoConfidentSamples, ShapeError
from .models import Classifier, DomainHead, MaskField, VideoEncoder, apply_mask


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of source logits against ground-truth labels."""
    return ad.cross_entropy_from_logits(logits, labels)


def domain_loss(features: Tensor, indicators, domain_head: DomainHead) -> Tensor:
    """Binary domain-discrimination loss; indicator 1 marks the source domain."""
    d = np.asarray(indicators, dtype=np.float64)
    if d.shape != (features.shape[0],):
        raise ShapeError(f"expected one indicator per feature row, got {d.shape} for {features.shape}")
    return ad.binary_cross_entropy_with_logits(domain_head.logits(features), d)


def masked_domain_loss(
    clips: Tensor,
    masks: MaskField,
    indicators,
    encoder: VideoEncoder,
    domain_head: DomainHead,
    grl_lambda: float = 1.0,
    reverse: bool = True,
) -> Tensor:
    """Domain-discrimination loss on masked clips.

    With ``reverse`` (encoder phase) the features pass through gradient
    reversal before the domain head, so the encoder's parameter gradients are
    sign-flipped while the head's are untouched. Without it (generator phase)
    gradients flow unreversed through the encoder into the mask.
    """
    feats = encoder(apply_mask(clips, masks))
    if reverse:
        feats = ad.grl(feats, grl_lambda)
    return domain_loss(feats, indicators, domain_head)


@dataclass
class PseudoLabels:
    """Hard labels from full-view logits: argmax index and its softmax confidence."""

    indices: np.ndarray
    confidence: np.ndarray
    origin_step: int = 0

    def keep_mask(self, tau: float) -> np.ndarray:
        return self.confidence >= tau


def pseudo_label(full_view_logits: Tensor, origin_step: int = 0) -> PseudoLabels:
    """Argmax per clip (lowest index wins ties), gradient-isolated."""
    with ad.no_grad():
        logits = full_view_logits.data
        indices = np.argmax(logits, axis=1)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        confidence = probs[np.arange(logits.shape[0]), indices]
    return PseudoLabels(indices=indices, confidence=confidence.astype(np.float64), origin_step=origin_step)


def masked_consistency_loss(
    clips: Tensor,
    masks: MaskField,
    encoder: VideoEncoder,
    classifier: Classifier,
    tau: float = 0.0,
    pseudo: PseudoLabels | None = None,
) -> tuple[Tensor, float]:
    """Cross-entropy of masked-view logits against full-view pseudo-labels.

    Pseudo-labels are recomputed from the complete clips under gradient
    isolation unless supplied. ``tau`` drops clips whose pseudo-label
    confidence falls below it; an empty remainder raises
    :class:`NoConfidentSamples`. Returns the loss and the kept fraction.
    """
    if pseudo is None:
        with ad.no_grad():
            pseudo = pseudo_label(classifier(encoder(clips)))
    keep = pseudo.keep_mask(tau)
    kept = float(keep.mean()) if keep.size else 0.0
    if not keep.any():
        raise NoConfidentSamples(f"all {keep.size} pseudo-labels fell below tau={tau}")
    if keep.all():
        masked_logits = classifier(encoder(apply_mask(clips, masks)))
        return ad.cross_entropy_from_logits(masked_logits, pseudo.indices), kept
    # Subset at the array level: masks are frozen-generator constants here.
    sub_clips = Tensor(clips.data[keep])
    sub_mask = MaskField(Tensor(masks.values.data[keep]), masks.keep_ratio)
    masked_logits = classifier(encoder(apply_mask(sub_clips, sub_mask)))
    return ad.cross_entropy_from_logits(masked_logits, pseudo.indices[keep]), kept


def mse_consistency_loss(
    clips: Tensor,
    masks: MaskField,
    encoder: VideoEncoder,
    classifier: Classifier,
) -> Tensor:
    """Mean squared error between masked-view and full-view probability vectors.

    The full-view branch is gradient-isolated; reduction is the mean over the
    batch-by-class probability grid.
    """
    with ad.no_grad():
        full_probs = ad.softmax(classifier(encoder(clips)), axis=1).data
    masked_probs = ad.softmax(classifier(encoder(apply_mask(clips, masks))), axis=1)
    diff = ad.sub(masked_probs, Tensor(full_probs))
    return ad.tmean(ad.mul(diff, diff))
