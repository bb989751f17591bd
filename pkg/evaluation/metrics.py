"""
Average precision at temporal IoU thresholds.

Predictions are matched greedily in score order to the unmatched ground
truth of the same video with the highest IoU; AP is the all-point
interpolated area under the precision/recall curve.
"""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd

from matching.segments import Segment, segment_iou

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def _keyed(items):
    return [item if isinstance(item, tuple) else ("", item) for item in items]


def interpolated_ap(precision, recall):
    mprec = np.hstack([[0.0], precision, [0.0]])
    mrec = np.hstack([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(preds, gts, tiou):
    """
    AP of ``preds`` against ``gts`` at ``tiou``; both are lists of segments
    or of ``(video_id, segment)`` pairs. Returns None without ground truth.
    """
    gts = _keyed(gts)
    if not gts:
        return None
    preds = sorted(_keyed(preds), key=lambda p: (-p[1].score, p[0], p[1].start, p[1].end))
    by_video = {}
    for index, (video, seg) in enumerate(gts):
        by_video.setdefault(video, []).append((index, seg))
    matched = set()
    tp = np.zeros(len(preds))
    for k, (video, seg) in enumerate(preds):
        best, best_iou = None, tiou
        for index, gt in by_video.get(video, []):
            if index in matched:
                continue
            iou = segment_iou(seg, gt)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = index, iou
        if best is not None:
            matched.add(best)
            tp[k] = 1.0
    if not preds:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(preds) + 1)
    recall = cum_tp / len(gts)
    return interpolated_ap(precision, recall)


@dataclass
class MapResult:
    thresholds: List[float]
    per_threshold: Dict[float, float]
    average: float
    per_class: Dict[int, List[float]] = field(default_factory=dict)

    def to_dict(self):
        return {
            "thresholds": list(self.thresholds),
            "map": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "average": self.average,
            "per_class": {str(c): aps for c, aps in sorted(self.per_class.items())},
        }

    def to_frame(self):
        row = {f"mAP@{t:.2f}": v for t, v in self.per_threshold.items()}
        row["Avg."] = self.average
        return pd.DataFrame([row])


def mean_ap(results, gts, thresholds=DEFAULT_THRESHOLDS):
    """
    Class-averaged AP per threshold plus the mean over thresholds.

    ``results`` and ``gts`` map video ids to lists of :class:`Segment`;
    classes without ground truth are skipped.
    """
    thresholds = [float(t) for t in thresholds]
    classes = sorted({seg.class_id for segs in gts.values() for seg in segs})
    per_class = {}
    for cls in classes:
        cls_gts = [(vid, s) for vid in sorted(gts) for s in gts[vid] if s.class_id == cls]
        cls_preds = [(vid, s) for vid in sorted(results) for s in results[vid] if s.class_id == cls]
        per_class[cls] = [average_precision(cls_preds, cls_gts, t) for t in thresholds]
    per_threshold = {
        t: float(np.mean([per_class[c][i] for c in classes])) if classes else 0.0
        for i, t in enumerate(thresholds)
    }
    average = float(np.mean(list(per_threshold.values()))) if thresholds else 0.0
    return MapResult(thresholds=thresholds, per_threshold=per_threshold, average=average, per_class=per_class)


def segments_from_records(records):
    return [Segment.from_bounds(r["start"], r["end"], r["class"], r.get("score", 1.0)) for r in records]
