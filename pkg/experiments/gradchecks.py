"""
Registry of finite-difference checks run by ``manage.py grad_check``.

Every check takes a seeded generator and returns the max relative error
between tape and central-difference gradients. Inputs stay away from the
kinks of relu/abs/max so central differences are well defined.
"""

import logging

import numpy as np

from autodiff import ops
from autodiff.engine import DiffArray
from autodiff.gradcheck import grad_check, grad_check_params
from detector.transformer import ModelConfig, TemporalDetector
from experiments.config import ExperimentConfig
from experiments.training import sample_loss
from feedback.guidance import aggregate_encoder_attention, guidance_decoder, guidance_encoder
from feedback.losses import FeedbackConfig, diversity_surrogate, feedback_loss_decoder, feedback_loss_encoder
from matching.criterion import LossWeights, differentiable_iou
from matching.segments import Segment
from videos.samples import VideoSample

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
CHECKS = {}


def register_check(name):
    def decorator(func):
        CHECKS[name] = func
        return func
    return decorator


def unregister_check(name):
    CHECKS.pop(name, None)


def _weighted(out, weights):
    """Scalar projection sum(out * W) so every output entry contributes."""
    return ops.sum_all(ops.mul(out, DiffArray(weights)))


def _unary(op, x, rng):
    w = rng.normal(size=op(DiffArray(x)).shape)
    return grad_check(lambda a: _weighted(op(a), w), x)


def _binary(op, a, b, rng):
    w = rng.normal(size=op(DiffArray(a), DiffArray(b)).shape)
    return max(
        grad_check(lambda x: _weighted(op(x, DiffArray(b)), w), a),
        grad_check(lambda y: _weighted(op(DiffArray(a), y), w), b),
    )


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _stochastic(rng, rows, cols):
    m = rng.uniform(0.1, 1.0, size=(rows, cols))
    return m / m.sum(axis=1, keepdims=True)


@register_check("add")
def check_add(rng):
    return max(
        _binary(ops.add, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng),
        _binary(ops.add, rng.normal(size=(3, 4)), rng.normal(size=4), rng),
    )


@register_check("sub")
def check_sub(rng):
    return _binary(ops.sub, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng)


@register_check("mul")
def check_mul(rng):
    return _binary(ops.mul, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng)


@register_check("div")
def check_div(rng):
    return _binary(ops.div, rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4)), rng)


@register_check("matmul")
def check_matmul(rng):
    return _binary(ops.matmul, rng.normal(size=(3, 5)), rng.normal(size=(5, 2)), rng)


@register_check("transpose")
def check_transpose(rng):
    return _unary(ops.transpose, rng.normal(size=(3, 5)), rng)


@register_check("getitem")
def check_getitem(rng):
    rows = np.array([0, 2, 2])
    return _unary(lambda a: a[(rows,)], rng.normal(size=(4, 3)), rng)


@register_check("concat")
def check_concat(rng):
    return _binary(lambda a, b: ops.concat([a, b], axis=-1), rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng)


@register_check("mean_of")
def check_mean_of(rng):
    return _binary(lambda a, b: ops.mean_of([a, b]), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng)


@register_check("sum_axis")
def check_sum_axis(rng):
    x = rng.normal(size=(3, 4))
    return max(_unary(lambda a: ops.sum_axis(a, 0), x, rng), _unary(lambda a: ops.sum_axis(a, 1), x, rng))


@register_check("mean_all")
def check_mean_all(rng):
    return grad_check(ops.mean_all, rng.normal(size=(3, 4)))


@register_check("max_all")
def check_max_all(rng):
    x = np.arange(12, dtype=np.float64).reshape(3, 4) + rng.uniform(0.0, 0.1, size=(3, 4))
    return grad_check(ops.max_all, x)


@register_check("relu")
def check_relu(rng):
    return _unary(ops.relu, _away_from_zero(rng, (3, 4)), rng)


@register_check("sigmoid")
def check_sigmoid(rng):
    return _unary(ops.sigmoid, rng.normal(size=(3, 4)), rng)


@register_check("absolute")
def check_absolute(rng):
    return _unary(ops.absolute, _away_from_zero(rng, (3, 4)), rng)


@register_check("maximum")
def check_maximum(rng):
    a = rng.normal(size=(3, 4))
    return _binary(ops.maximum, a, a + _away_from_zero(rng, (3, 4)), rng)


@register_check("minimum")
def check_minimum(rng):
    a = rng.normal(size=(3, 4))
    return _binary(ops.minimum, a, a + _away_from_zero(rng, (3, 4)), rng)


@register_check("elementwise_sqrt")
def check_sqrt(rng):
    return _unary(ops.elementwise_sqrt, rng.uniform(0.1, 2.0, size=(3, 4)), rng)


@register_check("softmax_rows")
def check_softmax(rng):
    return _unary(lambda a: ops.softmax_rows(a, 0.7), rng.normal(size=(3, 5)), rng)


@register_check("log_softmax_rows")
def check_log_softmax(rng):
    return _unary(ops.log_softmax_rows, rng.normal(size=(3, 5)), rng)


@register_check("layer_norm")
def check_layer_norm(rng):
    x, gain, bias = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(3, 6))
    return max(
        grad_check(lambda a: _weighted(ops.layer_norm(a, DiffArray(gain), DiffArray(bias)), w), x),
        grad_check(lambda g: _weighted(ops.layer_norm(DiffArray(x), g, DiffArray(bias)), w), gain),
        grad_check(lambda b: _weighted(ops.layer_norm(DiffArray(x), DiffArray(gain), b), w), bias),
    )


@register_check("row_normalize")
def check_row_normalize(rng):
    return _unary(ops.row_normalize, rng.uniform(0.1, 1.0, size=(3, 4)), rng)


@register_check("kl_rows")
def check_kl(rng):
    p, q = _stochastic(rng, 4, 5), _stochastic(rng, 4, 5)
    return max(
        grad_check(lambda a: ops.kl_rows(a, DiffArray(q)), p),
        grad_check(lambda b: ops.kl_rows(DiffArray(p), b), q),
    )


@register_check("segment_iou")
def check_segment_iou(rng):
    pred = np.column_stack([rng.uniform(0.3, 0.7, 4), rng.uniform(0.2, 0.4, 4)])
    target = pred + np.column_stack([rng.uniform(0.03, 0.08, 4), rng.uniform(0.02, 0.05, 4)])
    w = rng.normal(size=4)
    return grad_check(lambda a: _weighted(differentiable_iou(a, DiffArray(target)), w), pred)


@register_check("guidance_decoder")
def check_guidance_decoder(rng):
    return _unary(guidance_decoder, _stochastic(rng, 4, 6), rng)


@register_check("guidance_encoder")
def check_guidance_encoder(rng):
    return _unary(lambda a: guidance_encoder([a]), _stochastic(rng, 4, 6), rng)


@register_check("encoder_aggregation")
def check_aggregation(rng):
    first, second = _stochastic(rng, 5, 5), _stochastic(rng, 5, 5)
    return _binary(lambda a, b: aggregate_encoder_attention([a, b], "matmul"), first, second, rng)


@register_check("feedback_encoder")
def check_feedback_encoder(rng):
    h, g = _stochastic(rng, 5, 5), _stochastic(rng, 5, 5)
    return max(
        grad_check(lambda a: feedback_loss_encoder(a, DiffArray(g)), h),
        grad_check(lambda b: feedback_loss_encoder(DiffArray(h), b), g),
    )


@register_check("feedback_decoder")
def check_feedback_decoder(rng):
    self_map, cross = _stochastic(rng, 4, 4), _stochastic(rng, 4, 6)
    return max(
        grad_check(lambda a: feedback_loss_decoder([a], [guidance_decoder(DiffArray(cross))]), self_map),
        grad_check(lambda c: feedback_loss_decoder([DiffArray(self_map)], [guidance_decoder(c)]), cross),
    )


@register_check("diversity_surrogate")
def check_diversity_surrogate(rng):
    return grad_check(diversity_surrogate, _stochastic(rng, 5, 5))


def toy_problem(seed=0):
    """Tiny detector (T=8, 4 queries, 2 classes) with two ground-truth segments."""
    config = ModelConfig(
        num_encoder_layers=2, num_decoder_layers=2, num_queries=4, model_dim=8,
        num_heads=2, num_classes=2, feature_dim=4,
    )
    model = TemporalDetector(config, seed=seed)
    rng = np.random.default_rng(seed)
    # zero biases leave decoder layer 0 with a zero-variance layer-norm input
    for name, p in sorted(model.params.items()):
        if name.endswith("bias"):
            p.values[...] = rng.normal(scale=0.1, size=p.shape)
    sample = VideoSample(
        id="toy",
        features=rng.normal(size=(8, 4)),
        segments=[Segment(0.25, 0.25, 0), Segment(0.7, 0.3, 1)],
    )
    return model, sample


@register_check("end_to_end")
def check_end_to_end(rng, max_entries=None):
    model, sample = toy_problem()
    config = ExperimentConfig(loss=LossWeights(), feedback=FeedbackConfig())
    config.model = model.config

    def loss_fn():
        return sample_loss(model, sample, config)[0]

    errors = grad_check_params(loss_fn, model.params, max_entries=max_entries, seed=int(rng.integers(1 << 31)))
    worst = max(errors, key=errors.get)
    logger.debug("end_to_end worst tensor=%s err=%.3g", worst, errors[worst])
    return errors[worst]


def run_checks(names=None, seed=0, tolerance=TOLERANCE):
    """Run the selected checks (all by default); returns a list of result rows."""
    rows = []
    for name in names or sorted(CHECKS):
        error = float(CHECKS[name](np.random.default_rng(seed)))
        rows.append({"check": name, "max_rel_error": error, "passed": bool(error < tolerance)})
        logger.info("grad check %s err=%.3g", name, error)
    return rows
