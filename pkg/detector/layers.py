import numpy as np

from autodiff import ops
from autodiff.engine import DiffArray


def init_linear(params, rng, prefix, fan_in, fan_out):
    """Xavier-uniform weight (fan_in x fan_out) and zero bias."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    params[f"{prefix}.weight"] = DiffArray(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)
    params[f"{prefix}.bias"] = DiffArray(np.zeros(fan_out), requires_grad=True)


def init_layer_norm(params, prefix, dim):
    params[f"{prefix}.gain"] = DiffArray(np.ones(dim), requires_grad=True)
    params[f"{prefix}.bias"] = DiffArray(np.zeros(dim), requires_grad=True)


def linear(x, params, prefix):
    return ops.add(ops.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def layer_norm(x, params, prefix):
    return ops.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def mlp(x, params, prefix, depth=2):
    for i in range(depth - 1):
        x = ops.relu(linear(x, params, f"{prefix}.{i}"))
    return linear(x, params, f"{prefix}.{depth - 1}")


def dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ops.mul(x, DiffArray(keep))
