"""The four training objectives as differentiable scalar functions.

All losses are batch means, so the attribute weight and the learning rate
are batch-size invariant. Discriminator and classifier inputs are logits;
any sigmoid lives inside the loss for numerical stability.
"""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError


class LossVariant(str, enum.Enum):
    """Adversarial objective selector for one adaptation run."""

    ADDA_LOG = "adda_log"
    LSGAN_BOTH = "lsgan_both"


def attr_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Sigmoid cross entropy for multi-label attribute recognition.

    Mean over the batch of the per-sample sum over attributes of
    -a·log σ(z) - (1-a)·log(1-σ(z)), evaluated in the stable logit form.
    """
    if logits.data.shape != labels.data.shape:
        raise ShapeError(f"logits {logits.data.shape} vs labels {labels.data.shape}")
    lv = labels.data
    if not np.all((lv == 0) | (lv == 1)):
        raise ContractError("attribute labels must be binary 0/1")
    return ad.bce_with_logits(logits, labels)


def adda_losses(d_logits_source_frozen: Tensor, d_logits_target: Tensor):
    """Log-loss adversarial pair: discriminator loss and mapping loss.

    The mapping side uses the inverted-label form -mean log σ(D(M(x_t)));
    direct maximization of log(1-σ) saturates early and is not used.
    """
    d_loss = ad.add(
        ad.mean(ad.softplus(ad.scale(d_logits_source_frozen, -1.0))),
        ad.mean(ad.softplus(d_logits_target)),
    )
    return d_loss, adda_mapping_loss(d_logits_target)


def adda_mapping_loss(d_logits_target: Tensor) -> Tensor:
    return ad.mean(ad.softplus(ad.scale(d_logits_target, -1.0)))


def lsgan_losses(d_logits_source_frozen: Tensor, d_logits_union: Tensor):
    """Least-squares adversarial pair over raw discriminator outputs.

    The discriminator drives frozen-source features to 1 and adapted
    features to 0; the mapping drives its union-batch outputs to 1.
    """
    if d_logits_union.data.size == 0:
        raise ContractError("empty union batch")
    d_loss = ad.add(
        ad.mean(ad.square(ad.add_const(d_logits_source_frozen, -1.0))),
        ad.mean(ad.square(d_logits_union)),
    )
    return d_loss, lsgan_mapping_loss(d_logits_union)


def lsgan_mapping_loss(d_logits_union: Tensor) -> Tensor:
    if d_logits_union.data.size == 0:
        raise ContractError("empty union batch")
    return ad.mean(ad.square(ad.add_const(d_logits_union, -1.0)))


def combined_objective(m_adv_loss: Tensor, attr_loss_source: Tensor, alpha: float) -> Tensor:
    """Mapping loss plus alpha-weighted source attribute loss (alpha=0.1 default).

    alpha=0 returns the adversarial term unchanged, bit-exact with the
    classifier-free variant.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return m_adv_loss
    return ad.add(m_adv_loss, ad.scale(attr_loss_source, alpha))
