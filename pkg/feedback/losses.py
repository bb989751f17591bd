"""
Self-feedback objectives.

Self-attention row distributions are pulled toward guidance maps with a
row-wise KL divergence. Both arguments are row-renormalised first because
the square-rooted guidance maps are not row-stochastic.
"""

import logging
from dataclasses import dataclass

from django.db import models

from autodiff import ops
from autodiff.engine import DiffArray
from core.exceptions import ConfigError, DimensionError
from feedback.guidance import (
    aggregate_encoder_attention,
    guidance_decoder,
    guidance_encoder,
    identity_guidance,
)

logger = logging.getLogger(__name__)


class EncoderAggregation(models.TextChoices):
    MATMUL = "matmul", "Recurrent matrix product"
    AVERAGE = "average", "Mean over layers"
    LAST = "last", "Last layer only"


class DecoderMode(models.TextChoices):
    LAYER = "layer", "Per-layer guidance"
    LAST = "last", "Last layer only"
    AVERAGE = "average", "Mean over layers"


class Guidance(models.TextChoices):
    CROSS_ATTENTION = "cross_attention", "Cross-attention guidance"
    IDENTITY = "identity", "Identity target"
    DIVERSITY_MAX = "diversity_max", "Maximise diversity"
    OFF = "off", "No feedback"


@dataclass
class FeedbackConfig:
    encoder_aggregation: str = EncoderAggregation.MATMUL.value
    decoder_mode: str = DecoderMode.LAYER.value
    guidance: str = Guidance.CROSS_ATTENTION.value
    detach_guidance: bool = False
    use_encoder_feedback: bool = True
    use_decoder_feedback: bool = True

    def validate(self):
        for key, choices in (
            ("encoder_aggregation", EncoderAggregation),
            ("decoder_mode", DecoderMode),
            ("guidance", Guidance),
        ):
            if getattr(self, key) not in choices.values:
                raise ConfigError(f"feedback.{key} must be one of {choices.values}, got {getattr(self, key)!r}")
        return self


def zero():
    return DiffArray(0.0)


def row_renormalize(m, eps=ops.RENORM_EPS):
    return ops.row_normalize(m, eps)


def feedback_loss_encoder(h, g_e):
    """KL(renorm(H) || renorm(G_E))."""
    if h.shape != g_e.shape:
        raise DimensionError(f"encoder feedback: H {h.shape} vs G_E {g_e.shape}")
    return ops.kl_rows(row_renormalize(h), row_renormalize(g_e))


def feedback_loss_decoder(dec_self, g_d):
    """Sum over layers of KL(renorm(A_D^l) || renorm(G_D^l))."""
    if len(dec_self) != len(g_d):
        raise ConfigError(f"decoder feedback: {len(dec_self)} self-attention maps vs {len(g_d)} guidance maps")
    if not dec_self:
        return zero()
    terms = [feedback_loss_encoder(a, g) for a, g in zip(dec_self, g_d)]
    return terms[0] if len(terms) == 1 else ops.add_n(terms)


def diversity_surrogate(attn):
    """
    Smooth stand-in for the rank-1 residual diversity: the column mean
    replaces the column median, then the l1/l-inf composite norm.
    """
    col_mean = ops.scale(ops.sum_axis(attn, 0), 1.0 / attn.shape[0])
    residual = ops.absolute(ops.sub(attn, col_mean))
    col_max = ops.max_all(ops.sum_axis(residual, 0))
    row_max = ops.max_all(ops.sum_axis(residual, 1))
    return ops.elementwise_sqrt(ops.mul(col_max, row_max))


def alternative_guidance(mode, maps, reduction="sum"):
    """
    Loss term for the non cross-attention guidance modes.

    ``identity`` pulls every map toward the renormalised identity;
    ``diversity_max`` rewards the surrogate diversity (negative term).
    """
    if mode not in (Guidance.IDENTITY, Guidance.DIVERSITY_MAX):
        raise ConfigError(f"unknown alternative guidance mode {mode!r}")
    if not maps:
        return zero()
    if mode == Guidance.IDENTITY:
        terms = [feedback_loss_encoder(a, identity_guidance(a.shape[0])) for a in maps]
    else:
        terms = [ops.scale(diversity_surrogate(a), -1.0) for a in maps]
    total = terms[0] if len(terms) == 1 else ops.add_n(terms)
    if reduction == "mean":
        total = ops.scale(total, 1.0 / len(terms))
    return total


def _guidance_source(cross_maps, detach):
    return [c.detach() for c in cross_maps] if detach else list(cross_maps)


def _decoder_pairs(dec_self, cross, mode):
    if mode == DecoderMode.LAYER:
        return list(dec_self), list(cross)
    if mode == DecoderMode.LAST:
        return [dec_self[-1]], [cross[-1]]
    avg_self = dec_self[0] if len(dec_self) == 1 else ops.mean_of(dec_self)
    avg_cross = cross[0] if len(cross) == 1 else ops.mean_of(cross)
    return [avg_self], [avg_cross]


def compute_feedback(bundle, config):
    """
    Encoder and decoder feedback terms for one forward pass.

    Terms whose attention maps do not exist (encoder removed, decoder
    self-attention removed) or that are switched off are exactly 0.
    """
    fb_enc, fb_dec = zero(), zero()
    mode = config.guidance
    if mode == Guidance.OFF:
        return fb_enc, fb_dec
    cross = _guidance_source(bundle.cross, config.detach_guidance)
    enc_on = config.use_encoder_feedback and bundle.enc_self
    dec_on = config.use_decoder_feedback and bundle.dec_self

    if mode == Guidance.DIVERSITY_MAX:
        if enc_on:
            fb_enc = alternative_guidance(mode, bundle.enc_self, reduction="mean")
        if dec_on:
            fb_dec = alternative_guidance(mode, bundle.dec_self)
        return fb_enc, fb_dec

    if enc_on:
        h = aggregate_encoder_attention(bundle.enc_self, config.encoder_aggregation)
        if mode == Guidance.IDENTITY:
            fb_enc = alternative_guidance(mode, [h])
        else:
            fb_enc = feedback_loss_encoder(h, guidance_encoder(cross))
    if dec_on:
        selfs, crosses = _decoder_pairs(bundle.dec_self, cross, config.decoder_mode)
        if mode == Guidance.IDENTITY:
            fb_dec = alternative_guidance(mode, selfs)
        else:
            fb_dec = feedback_loss_decoder(selfs, [guidance_decoder(c) for c in crosses])
    logger.debug("feedback guidance=%s enc=%.6g dec=%.6g", mode, fb_enc.item(), fb_dec.item())
    return fb_enc, fb_dec
