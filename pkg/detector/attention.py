import numpy as np

from autodiff import ops
from core.exceptions import DimensionError
from detector.layers import init_linear, linear


def init_attention(params, rng, prefix, dim):
    for name in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{prefix}.{name}", dim, dim)


def multi_head_attention(q, k, v, params, prefix, heads):
    """
    Scaled dot-product attention over ``heads`` column groups.

    Returns the output projected back to model_dim and the head-averaged
    attention map (L_q x L_k), which stays on the tape.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("multi_head_attention expects matrices")
    if k.shape[0] != v.shape[0] or q.shape[1] != k.shape[1] or k.shape[1] != v.shape[1]:
        raise DimensionError(f"attention inputs q{q.shape} k{k.shape} v{v.shape} do not line up")
    dim = q.shape[1]
    if dim % heads:
        raise DimensionError(f"model_dim {dim} is not divisible by {heads} heads")
    head_dim = dim // heads
    scale = 1.0 / np.sqrt(head_dim)

    queries = linear(q, params, f"{prefix}.q")
    keys = linear(k, params, f"{prefix}.k")
    values = linear(v, params, f"{prefix}.v")

    outputs, maps = [], []
    for h in range(heads):
        cols = (slice(None), slice(h * head_dim, (h + 1) * head_dim))
        attn = ops.softmax_rows(ops.matmul(queries[cols], ops.transpose(keys[cols])), scale=scale)
        outputs.append(ops.matmul(attn, values[cols]))
        maps.append(attn)
    merged = outputs[0] if heads == 1 else ops.concat(outputs, axis=-1)
    head_avg = maps[0] if heads == 1 else ops.mean_of(maps)
    return linear(merged, params, f"{prefix}.o"), head_avg
