"""
Differentiable operations on :class:`~autodiff.engine.DiffArray`.

Broadcasting is limited to adding a trailing-axis vector (bias add) and
multiplying by a Python scalar.
"""

import numpy as np

from core.exceptions import DimensionError, DomainError
from autodiff.engine import DiffArray

SQRT_EPS = 1e-12
KL_EPS = 1e-8
RENORM_EPS = 1e-8
LAYER_NORM_EPS = 1e-5


def as_array(x):
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x)


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_bias(vec, target):
    return vec.ndim == 1 and target.ndim >= 1 and target.shape[-1] == vec.shape[0] and target.ndim > 1


def _reduce_bias(g, length):
    return g.reshape(-1, length).sum(axis=0)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    if not isinstance(b, DiffArray) and np.isscalar(b):
        return add_scalar(a, b)
    a, b = as_array(a), as_array(b)
    if a.shape == b.shape:
        return DiffArray._wrap(a.values + b.values, (a, b), lambda g: (g, g))
    if _is_bias(b, a):
        n = b.shape[0]
        return DiffArray._wrap(a.values + b.values, (a, b), lambda g: (g, _reduce_bias(g, n)))
    if _is_bias(a, b):
        return add(b, a)
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def add_scalar(a, c):
    a = as_array(a)
    return DiffArray._wrap(a.values + float(c), (a,), lambda g: (g,))


def sub(a, b):
    if not isinstance(b, DiffArray) and np.isscalar(b):
        return add_scalar(a, -float(b))
    a, b = as_array(a), as_array(b)
    if a.shape == b.shape:
        return DiffArray._wrap(a.values - b.values, (a, b), lambda g: (g, -g))
    if _is_bias(b, a):
        n = b.shape[0]
        return DiffArray._wrap(a.values - b.values, (a, b), lambda g: (g, -_reduce_bias(g, n)))
    raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")


def scale(a, c):
    a = as_array(a)
    c = float(c)
    return DiffArray._wrap(a.values * c, (a,), lambda g: (g * c,))


def mul(a, b):
    if not isinstance(b, DiffArray) and np.isscalar(b):
        return scale(a, b)
    a, b = as_array(a), as_array(b)
    if a.shape == b.shape:
        av, bv = a.values, b.values
        return DiffArray._wrap(av * bv, (a, b), lambda g: (g * bv, g * av))
    if b.size == 1 and b.ndim == 0:
        av, bv = a.values, b.values
        return DiffArray._wrap(av * bv, (a, b), lambda g: (g * bv, np.sum(g * av).reshape(())))
    if a.size == 1 and a.ndim == 0:
        return mul(b, a)
    raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def div(a, b):
    a, b = as_array(a), as_array(b)
    _require_same_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return DiffArray._wrap(out, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def matmul(a, b):
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return DiffArray._wrap(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = as_array(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return DiffArray._wrap(a.values.T.copy(), (a,), lambda g: (g.T.copy(),))


# ---------------------------------------------------------------- indexing

def getitem(a, index):
    a = as_array(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return DiffArray._wrap(np.array(a.values[index]), (a,), vjp)


def concat(arrays, axis=-1):
    arrays = [as_array(x) for x in arrays]
    if not arrays:
        raise DimensionError("concat needs at least one array")
    axis = axis % arrays[0].ndim
    sizes = [x.shape[axis] for x in arrays]
    try:
        out = np.concatenate([x.values for x in arrays], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(p.copy() for p in np.split(g, bounds, axis=axis))

    return DiffArray._wrap(out, tuple(arrays), vjp)


def mean_of(arrays):
    """Element-wise mean of equally shaped arrays."""
    arrays = [as_array(x) for x in arrays]
    if not arrays:
        raise DimensionError("mean_of needs at least one array")
    for other in arrays[1:]:
        _require_same_shape(arrays[0], other, "mean_of")
    k = len(arrays)
    out = sum(x.values for x in arrays[1:]) if k > 1 else 0.0
    out = (arrays[0].values + out) / k
    return DiffArray._wrap(out, tuple(arrays), lambda g: tuple(g / k for _ in range(k)))


def add_n(arrays):
    arrays = [as_array(x) for x in arrays]
    if not arrays:
        raise DimensionError("add_n needs at least one array")
    for other in arrays[1:]:
        _require_same_shape(arrays[0], other, "add_n")
    out = arrays[0].values.copy()
    for x in arrays[1:]:
        out = out + x.values
    return DiffArray._wrap(out, tuple(arrays), lambda g: tuple(g for _ in arrays))


# ---------------------------------------------------------------- reductions

def sum_all(a):
    a = as_array(a)
    shape = a.shape
    return DiffArray._wrap(np.sum(a.values).reshape(()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a):
    a = as_array(a)
    n = a.size
    return scale(sum_all(a), 1.0 / n)


def sum_axis(a, axis):
    a = as_array(a)
    shape = a.shape
    axis = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return DiffArray._wrap(a.values.sum(axis=axis), (a,), vjp)


def max_all(a):
    """Maximum entry; the adjoint goes to the first maximiser."""
    a = as_array(a)
    flat = int(np.argmax(a.values))
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full.flat[flat] = float(g)
        return (full,)

    return DiffArray._wrap(np.array(a.values.flat[flat]).reshape(()), (a,), vjp)


# ---------------------------------------------------------------- elementwise

def relu(a):
    a = as_array(a)
    mask = a.values > 0
    return DiffArray._wrap(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_array(a)
    out = 1.0 / (1.0 + np.exp(-a.values))
    return DiffArray._wrap(out, (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a):
    a = as_array(a)
    sign = np.sign(a.values)
    return DiffArray._wrap(np.abs(a.values), (a,), lambda g: (g * sign,))


def maximum(a, b):
    """Element-wise maximum; ties send the adjoint to ``a``."""
    a, b = as_array(a), as_array(b)
    _require_same_shape(a, b, "maximum")
    pick_a = a.values >= b.values
    out = np.where(pick_a, a.values, b.values)
    return DiffArray._wrap(out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


def minimum(a, b):
    """Element-wise minimum; ties send the adjoint to ``a``."""
    a, b = as_array(a), as_array(b)
    _require_same_shape(a, b, "minimum")
    pick_a = a.values <= b.values
    out = np.where(pick_a, a.values, b.values)
    return DiffArray._wrap(out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


def elementwise_sqrt(a, eps=SQRT_EPS):
    a = as_array(a)
    if np.any(a.values < 0):
        raise DomainError(f"elementwise_sqrt: negative entry {float(a.values.min())!r}")
    out = np.sqrt(a.values)
    denom = 2.0 * np.sqrt(a.values + eps)
    return DiffArray._wrap(out, (a,), lambda g: (g / denom,))


# ---------------------------------------------------------------- row-wise ops

def softmax_rows(x, scale=1.0):
    """Softmax along the last axis of ``scale * x``, stabilised by the row max."""
    x = as_array(x)
    z = x.values * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)) * scale,)

    return DiffArray._wrap(s, (x,), vjp)


def log_softmax_rows(x):
    x = as_array(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    return DiffArray._wrap(out, (x,), vjp)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    x, gain, bias = as_array(x), as_array(gain), as_array(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centred = x.values - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * gain.values + bias.values

    def vjp(g):
        dxhat = g * gain.values
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _reduce_bias(g * xhat, d), _reduce_bias(g, d)

    return DiffArray._wrap(out, (x, gain, bias), vjp)


def row_normalize(m, eps=RENORM_EPS):
    """Divide each row by (row sum + eps)."""
    m = as_array(m)
    denom = m.values.sum(axis=-1, keepdims=True) + eps
    out = m.values / denom

    def vjp(g):
        return (g / denom - np.sum(g * m.values, axis=-1, keepdims=True) / (denom * denom),)

    return DiffArray._wrap(out, (m,), vjp)


def kl_rows(p, q, eps=KL_EPS):
    """Mean over rows of sum_j p_ij * ln((p_ij + eps) / (q_ij + eps))."""
    p, q = as_array(p), as_array(q)
    _require_same_shape(p, q, "kl_rows")
    pv, qv = p.values, q.values
    rows = 1 if pv.ndim < 2 else int(np.prod(pv.shape[:-1]))
    log_ratio = np.log(pv + eps) - np.log(qv + eps)
    value = np.sum(pv * log_ratio) / rows

    def vjp(g):
        g = float(g)
        dp = g * (log_ratio + pv / (pv + eps)) / rows
        dq = -g * pv / (qv + eps) / rows
        return dp, dq

    return DiffArray._wrap(np.array(value), (p, q), vjp)
