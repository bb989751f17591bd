"""
DETR-style temporal detector over 1-D feature sequences.

The encoder refines projected features with self-attention, the decoder
relates learnable action queries to the encoder output, and shared heads
turn every decoder layer's query states into class logits and
(center, width) segments. Every attention map of a forward pass is kept
in an :class:`AttentionBundle` so the feedback losses can reach it.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from autodiff import ops
from autodiff.engine import DiffArray
from core.exceptions import ConfigError, DataFormatError, DimensionError
from detector.attention import init_attention, multi_head_attention
from detector.layers import dropout, init_layer_norm, init_linear, layer_norm, linear, mlp
from detector.positional import positional_encoding

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    num_encoder_layers: int = 2
    num_decoder_layers: int = 4
    num_queries: int = 40
    model_dim: int = 64
    num_heads: int = 4
    mlp_dim: Optional[int] = None
    num_classes: int = 5
    feature_dim: int = 32
    dropout: float = 0.0
    use_encoder: bool = True
    decoder_self_attention: bool = True

    @property
    def hidden_dim(self):
        return self.mlp_dim if self.mlp_dim else 4 * self.model_dim

    @property
    def encoder_layers(self):
        return self.num_encoder_layers if self.use_encoder else 0

    def validate(self):
        if self.model_dim % 2:
            raise ConfigError(f"model.model_dim must be even, got {self.model_dim}")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(f"model.model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 1:
            raise ConfigError("model needs num_encoder_layers >= 0 and num_decoder_layers >= 1")
        if self.num_queries < 1 or self.num_classes < 1 or self.feature_dim < 1:
            raise ConfigError("model.num_queries, num_classes and feature_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")
        return self


@dataclass
class AttentionBundle:
    enc_self: List[DiffArray] = field(default_factory=list)
    dec_self: List[DiffArray] = field(default_factory=list)
    cross: List[DiffArray] = field(default_factory=list)


@dataclass
class Prediction:
    class_logits: DiffArray
    segments: DiffArray

    def probabilities(self):
        logits = self.class_logits.values
        z = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)


def encoder_forward(features, params, config, rng=None):
    """Self-attention and MLP blocks, each with skip + layer norm."""
    maps = []
    x = features
    for i in range(config.encoder_layers):
        prefix = f"encoder.{i}"
        attended, attn = multi_head_attention(x, x, x, params, f"{prefix}.self_attn", config.num_heads)
        x = layer_norm(ops.add(x, dropout(attended, config.dropout, rng)), params, f"{prefix}.norm1")
        x = layer_norm(ops.add(x, dropout(mlp(x, params, f"{prefix}.mlp"), config.dropout, rng)), params, f"{prefix}.norm2")
        maps.append(attn)
    return x, maps


def decoder_forward(enc_out, query_embed, params, config, pos=None, rng=None):
    """
    Query self-attention, cross-attention against the encoder output and an
    MLP per layer. Returns the query states after every layer together with
    the self- and cross-attention maps.
    """
    length = enc_out.shape[0]
    if pos is None:
        pos = DiffArray(positional_encoding(length, config.model_dim))
    keys = ops.add(enc_out, pos)
    tgt = DiffArray(np.zeros((query_embed.shape[0], config.model_dim)))
    states, self_maps, cross_maps = [], [], []
    for layer in range(config.num_decoder_layers):
        prefix = f"decoder.{layer}"
        if config.decoder_self_attention:
            qk = ops.add(tgt, query_embed)
            attended, attn = multi_head_attention(qk, qk, tgt, params, f"{prefix}.self_attn", config.num_heads)
            tgt = layer_norm(ops.add(tgt, dropout(attended, config.dropout, rng)), params, f"{prefix}.norm1")
            self_maps.append(attn)
        attended, cross = multi_head_attention(
            ops.add(tgt, query_embed), keys, enc_out, params, f"{prefix}.cross_attn", config.num_heads
        )
        tgt = layer_norm(ops.add(tgt, dropout(attended, config.dropout, rng)), params, f"{prefix}.norm2")
        tgt = layer_norm(ops.add(tgt, dropout(mlp(tgt, params, f"{prefix}.mlp"), config.dropout, rng)), params, f"{prefix}.norm3")
        states.append(tgt)
        cross_maps.append(cross)
    return states, self_maps, cross_maps


def predict_heads(query_state, params):
    """Linear class head over C+1 logits (index C is background) and a 3-layer segment MLP."""
    logits = linear(query_state, params, "class_head")
    segments = ops.sigmoid(mlp(query_state, params, "segment_head", depth=3))
    return Prediction(class_logits=logits, segments=segments)


class TemporalDetector:
    """Parameter container plus the full forward pass."""

    def __init__(self, config, params=None, seed=0):
        self.config = config.validate()
        self.seed = seed
        self.params = params if params is not None else self._init_params()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(self.seed)
        params = {}
        d, hidden = cfg.model_dim, cfg.hidden_dim
        init_linear(params, rng, "input_proj", cfg.feature_dim, d)
        for i in range(cfg.encoder_layers):
            prefix = f"encoder.{i}"
            init_attention(params, rng, f"{prefix}.self_attn", d)
            init_layer_norm(params, f"{prefix}.norm1", d)
            init_linear(params, rng, f"{prefix}.mlp.0", d, hidden)
            init_linear(params, rng, f"{prefix}.mlp.1", hidden, d)
            init_layer_norm(params, f"{prefix}.norm2", d)
        params["query_embed"] = DiffArray(rng.normal(0.0, 1.0, size=(cfg.num_queries, d)), requires_grad=True)
        for layer in range(cfg.num_decoder_layers):
            prefix = f"decoder.{layer}"
            if cfg.decoder_self_attention:
                init_attention(params, rng, f"{prefix}.self_attn", d)
                init_layer_norm(params, f"{prefix}.norm1", d)
            init_attention(params, rng, f"{prefix}.cross_attn", d)
            init_layer_norm(params, f"{prefix}.norm2", d)
            init_linear(params, rng, f"{prefix}.mlp.0", d, hidden)
            init_linear(params, rng, f"{prefix}.mlp.1", hidden, d)
            init_layer_norm(params, f"{prefix}.norm3", d)
        init_linear(params, rng, "class_head", d, cfg.num_classes + 1)
        init_linear(params, rng, "segment_head.0", d, d)
        init_linear(params, rng, "segment_head.1", d, d)
        init_linear(params, rng, "segment_head.2", d, 2)
        for name, p in params.items():
            p.name = name
        logger.debug("initialised detector params=%d values=%d", len(params), self.num_values(params))
        return params

    @staticmethod
    def num_values(params):
        return sum(p.size for p in params.values())

    def forward(self, features, rng=None):
        """
        Run the detector on one (T x feature_dim) sequence.

        Returns one :class:`Prediction` per decoder layer and the
        :class:`AttentionBundle` of the pass. ``rng`` enables dropout.
        """
        cfg = self.config
        features = features if isinstance(features, DiffArray) else DiffArray(features)
        if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
            raise DimensionError(f"expected (T x {cfg.feature_dim}) features, got {features.shape}")
        pos = DiffArray(positional_encoding(features.shape[0], cfg.model_dim))
        x = ops.add(linear(features, self.params, "input_proj"), pos)
        enc_out, enc_maps = encoder_forward(x, self.params, cfg, rng)
        states, self_maps, cross_maps = decoder_forward(
            enc_out, self.params["query_embed"], self.params, cfg, pos=pos, rng=rng
        )
        predictions = [predict_heads(state, self.params) for state in states]
        return predictions, AttentionBundle(enc_self=enc_maps, dec_self=self_maps, cross=cross_maps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {f"param/{name}": p.values for name, p in self.params.items()}

    def load_state_dict(self, tensors):
        expected = set(self.params)
        found = {name[len("param/"):] for name in tensors if name.startswith("param/")}
        if expected != found:
            missing = sorted(expected - found)[:3]
            extra = sorted(found - expected)[:3]
            raise DataFormatError(f"checkpoint parameters do not match the model (missing {missing}, unexpected {extra})")
        for name, p in self.params.items():
            values = tensors[f"param/{name}"]
            if values.shape != p.shape:
                raise DataFormatError(f"checkpoint tensor {name} has shape {values.shape}, model expects {p.shape}")
            p.values[...] = values
        return self
