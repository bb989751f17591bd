import numpy as np

from autodiff.engine import DiffArray, no_grad


def _relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def numeric_gradient(f, values, h=1e-5):
    """Central differences of a scalar function of one array."""
    values = np.array(values, dtype=np.float64)
    numeric = np.zeros_like(values)
    with no_grad():
        for idx in np.ndindex(values.shape):
            original = values[idx]
            values[idx] = original + h
            plus = float(f(DiffArray(values)).values)
            values[idx] = original - h
            minus = float(f(DiffArray(values)).values)
            values[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * h)
    return numeric


def grad_check(f, x, h=1e-5):
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences."""
    values = x.values if isinstance(x, DiffArray) else np.asarray(x, dtype=np.float64)
    leaf = DiffArray(values, requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(values)
    return _relative_error(analytic, numeric_gradient(f, values, h))


def grad_check_params(loss_fn, params, h=1e-5, max_entries=None, seed=0):
    """
    Check ``loss_fn()`` against central differences for every parameter in
    ``params`` (a name -> DiffArray dict, perturbed in place).

    ``max_entries`` caps the entries checked per tensor; the subset is drawn
    from a seeded generator.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        indices = list(np.ndindex(p.shape))
        if max_entries is not None and len(indices) > max_entries:
            picks = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(picks)]
        worst = 0.0
        with no_grad():
            for idx in indices:
                original = p.values[idx]
                p.values[idx] = original + h
                plus = float(loss_fn().values)
                p.values[idx] = original - h
                minus = float(loss_fn().values)
                p.values[idx] = original
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx])))
        errors[name] = float(worst)
    return errors
