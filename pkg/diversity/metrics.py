"""
Distance of an attention map from a rank-1 matrix ``1 a^T``.

The residual is measured with the composite norm sqrt(|E|_1 |E|_inf), where
|E|_1 is the largest absolute column sum and |E|_inf the largest absolute
row sum. ``a`` is the column-wise median, which minimises the l1 factor per
column; the exact joint minimiser is not computed.
"""

import numpy as np


def composite_norm(e):
    e = np.abs(np.asarray(e, dtype=np.float64))
    if e.size == 0:
        return 0.0
    return float(np.sqrt(e.sum(axis=0).max() * e.sum(axis=1).max()))


def rank1_residual(attn):
    """Return (a, d): the column medians and the composite norm of A - 1 a^T."""
    attn = np.asarray(attn, dtype=np.float64)
    a = np.median(attn, axis=0)
    return a, composite_norm(attn - a[None, :])


def diversity(attn):
    return rank1_residual(attn)[1]
