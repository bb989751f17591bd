"""
Set-prediction objective: Hungarian matching between queries and ground
truth, the per-layer detection loss and the weighted total with the
self-feedback terms.
"""

import logging
from dataclasses import dataclass

import numpy as np

from autodiff import ops
from autodiff.engine import DiffArray
from core.exceptions import CapacityError, ConfigError, TrainingDivergedError
from matching.hungarian import hungarian
from matching.segments import iou_matrix

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    w_cls: float = 2.0
    w_l1: float = 2.0
    w_iou: float = 5.0
    lambda_e: float = 5.0
    lambda_d: float = 5.0
    background_weight: float = 0.1
    aux_loss: bool = True

    def validate(self):
        for key in ("w_cls", "w_l1", "w_iou", "lambda_e", "lambda_d", "background_weight"):
            if getattr(self, key) < 0:
                raise ConfigError(f"loss.{key} must be >= 0, got {getattr(self, key)}")
        return self


def _bounds(centers, widths):
    return centers - widths / 2.0, centers + widths / 2.0


def match_cost_matrix(pred, gts, weights):
    """cost[i, j] = -w_cls p_j(c_i) + w_l1 |t_i - t_j|_1 + w_iou (1 - IoU(t_i, t_j))."""
    num_queries = pred.segments.shape[0]
    if len(gts) > num_queries:
        raise CapacityError(f"{len(gts)} ground truths exceed {num_queries} queries")
    if not gts:
        return np.zeros((0, num_queries))
    probs = pred.probabilities()
    seg = pred.segments.values
    gt = np.array([[g.center, g.width] for g in gts])
    classes = np.array([g.class_id for g in gts])
    l1 = np.abs(gt[:, None, :] - seg[None, :, :]).sum(axis=-1)
    gs, ge = _bounds(gt[:, 0], gt[:, 1])
    ps, pe = _bounds(seg[:, 0], seg[:, 1])
    iou = iou_matrix(gs, ge, ps, pe)
    return -weights.w_cls * probs[:, classes].T + weights.w_l1 * l1 + weights.w_iou * (1.0 - iou)


def differentiable_iou(pred_segments, target_segments):
    """Row-wise 1-D IoU of two (k x 2) (center, width) arrays."""
    pc, pw = pred_segments[:, 0], pred_segments[:, 1]
    tc, tw = target_segments[:, 0], target_segments[:, 1]
    half_p, half_t = ops.scale(pw, 0.5), ops.scale(tw, 0.5)
    inter = ops.relu(ops.sub(
        ops.minimum(ops.add(pc, half_p), ops.add(tc, half_t)),
        ops.maximum(ops.sub(pc, half_p), ops.sub(tc, half_t)),
    ))
    union = ops.sub(ops.add(pw, tw), inter)
    return ops.div(inter, union)


def detr_loss_single(pred, gts, weights):
    """Matched detection loss for one decoder layer; returns (loss, parts, assignment)."""
    num_queries, num_logits = pred.class_logits.shape
    background = num_logits - 1
    assignment = hungarian(match_cost_matrix(pred, gts, weights)) if gts else []

    targets = np.full(num_queries, background)
    query_weights = np.full(num_queries, weights.background_weight)
    for gt_index, query in assignment:
        targets[query] = gts[gt_index].class_id
        query_weights[query] = 1.0

    log_probs = ops.log_softmax_rows(pred.class_logits)
    picked = log_probs[(np.arange(num_queries), targets)]
    denom = float(query_weights.sum())
    ce = ops.scale(ops.sum_all(ops.mul(picked, DiffArray(query_weights))), -1.0 / denom) if denom > 0 else DiffArray(0.0)

    if assignment:
        queries = np.array([q for _, q in assignment])
        matched = pred.segments[(queries,)]
        target = DiffArray(np.array([[gts[i].center, gts[i].width] for i, _ in assignment]))
        num_gt = float(len(gts))
        l1 = ops.scale(ops.sum_all(ops.absolute(ops.sub(matched, target))), 1.0 / num_gt)
        iou_loss = ops.scale(
            ops.sum_all(ops.add_scalar(ops.scale(differentiable_iou(matched, target), -1.0), 1.0)), 1.0 / num_gt
        )
    else:
        l1, iou_loss = DiffArray(0.0), DiffArray(0.0)

    total = ops.add_n([
        ops.scale(ce, weights.w_cls),
        ops.scale(l1, weights.w_l1),
        ops.scale(iou_loss, weights.w_iou),
    ])
    parts = {"cls": ce.item(), "l1": l1.item(), "iou": iou_loss.item()}
    return total, parts, assignment


def detr_loss(pred_per_layer, gts, weights):
    """
    Detection loss with deep supervision: the mean over decoder layers when
    ``weights.aux_loss`` is set, otherwise the last layer only.
    """
    layers = pred_per_layer if weights.aux_loss else pred_per_layer[-1:]
    losses = []
    parts = assignment = None
    for pred in layers:
        loss, parts, assignment = detr_loss_single(pred, gts, weights)
        losses.append(loss)
    total = losses[0] if len(losses) == 1 else ops.scale(ops.add_n(losses), 1.0 / len(losses))
    return total, {"last_layer": parts, "assignment": assignment}


def total_loss(detr, fb_enc, fb_dec, weights):
    """L = L_DETR + lambda_e * L_fb^E + lambda_d * L_fb^D."""
    detr, fb_enc, fb_dec = ops.as_array(detr), ops.as_array(fb_enc), ops.as_array(fb_dec)
    components = {"detr": detr.item(), "fb_enc": fb_enc.item(), "fb_dec": fb_dec.item()}
    if not all(np.isfinite(v) for v in components.values()):
        raise TrainingDivergedError("non-finite loss component", components=components)
    return ops.add_n([detr, ops.scale(fb_enc, weights.lambda_e), ops.scale(fb_dec, weights.lambda_d)])
