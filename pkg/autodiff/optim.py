import logging

import numpy as np

from core.exceptions import DimensionError, TrainingDivergedError

logger = logging.getLogger(__name__)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One bias-corrected Adam update, in place.

    ``params`` and ``grads`` map names to arrays; ``state`` holds ``step`` and
    the ``m``/``v`` moment dicts and starts out as ``{}``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}", step=state.get("step", 0))
    state.setdefault("step", 0)
    state.setdefault("m", {})
    state.setdefault("v", {})
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state["m"].get(name)
        v = state["v"].get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state["m"][name] = m
        state["v"][name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for name in grads:
            grads[name] = grads[name] * factor
    return total


class Adam:
    """Adam over a dict of :class:`DiffArray` parameters."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = {}

    @property
    def step_count(self):
        return self.state.get("step", 0)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.values))
            for name, p in self.params.items()
        }
        norm = clip_grad_norm(grads, self.clip_norm)
        values = {name: p.values for name, p in self.params.items()}
        adam_step(values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        logger.debug("adam step=%d grad_norm=%.6g lr=%.3g", self.step_count, norm, self.lr)
        return norm

    def state_tensors(self):
        tensors = {}
        for name in self.params:
            if name in self.state.get("m", {}):
                tensors[f"adam_m/{name}"] = self.state["m"][name]
                tensors[f"adam_v/{name}"] = self.state["v"][name]
        return tensors

    def load_state(self, step, tensors):
        self.state = {"step": int(step), "m": {}, "v": {}}
        for name in self.params:
            if f"adam_m/{name}" in tensors:
                self.state["m"][name] = np.array(tensors[f"adam_m/{name}"])
                self.state["v"][name] = np.array(tensors[f"adam_v/{name}"])
