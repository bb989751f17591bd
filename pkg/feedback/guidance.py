"""Guidance maps built from decoder cross-attention."""

import numpy as np

from autodiff import ops
from autodiff.engine import DiffArray
from core.exceptions import ConfigError


def guidance_decoder(cross_map):
    """G_D = sqrt(A_C A_C^T): query-to-query similarity through shared encoder tokens."""
    return ops.elementwise_sqrt(ops.matmul(cross_map, ops.transpose(cross_map)))


def guidance_encoder(cross_maps):
    """G_E = sqrt(mean(A_C)^T mean(A_C)) over decoder layers."""
    if not cross_maps:
        raise ConfigError("guidance_encoder needs at least one cross-attention map")
    avg = cross_maps[0] if len(cross_maps) == 1 else ops.mean_of(cross_maps)
    return ops.elementwise_sqrt(ops.matmul(ops.transpose(avg), avg))


def aggregate_encoder_attention(enc_self, mode="matmul"):
    """
    Collapse the encoder self-attention maps into one T x T map H.

    ``matmul`` is the recurrence H^1 = A^1, H^i = sqrt(H^{i-1} (A^i)^T);
    ``average`` is the mean map and ``last`` the final layer's map.
    """
    if not enc_self:
        raise ConfigError("aggregate_encoder_attention needs at least one map")
    if mode == "matmul":
        h = enc_self[0]
        for attn in enc_self[1:]:
            h = ops.elementwise_sqrt(ops.matmul(h, ops.transpose(attn)))
        return h
    if mode == "average":
        return enc_self[0] if len(enc_self) == 1 else ops.mean_of(enc_self)
    if mode == "last":
        return enc_self[-1]
    raise ConfigError(f"unknown encoder aggregation {mode!r}")


def identity_guidance(size):
    return DiffArray(np.eye(size))
