import math
from dataclasses import replace

from django.db import models

from core.exceptions import ConfigError
from matching.segments import segment_iou


class Decay(models.TextChoices):
    LINEAR = "linear", "score * (1 - IoU)"
    GAUSSIAN = "gaussian", "score * exp(-IoU^2 / sigma)"


def _order(seg):
    return (-seg.score, seg.start, seg.end)


def soft_nms(preds, iou_thresh=0.40, top_k=None, decay=Decay.LINEAR, sigma=0.5):
    """
    Soft non-maximum suppression over the scored segments of one class.

    Repeatedly keeps the best remaining segment and decays the score of every
    remaining segment overlapping it by more than ``iou_thresh``. Returns the
    ``top_k`` survivors ordered by (score desc, start asc, end asc).
    """
    if decay not in Decay.values:
        raise ConfigError(f"unknown SoftNMS decay {decay!r}")
    remaining = sorted(preds, key=_order)
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        decayed = []
        for seg in remaining:
            iou = segment_iou(best, seg)
            if iou > iou_thresh:
                factor = (1.0 - iou) if decay == Decay.LINEAR else math.exp(-(iou * iou) / sigma)
                seg = replace(seg, score=seg.score * factor)
            decayed.append(seg)
        remaining = sorted(decayed, key=_order)
    kept.sort(key=_order)
    return kept if top_k is None else kept[:top_k]
