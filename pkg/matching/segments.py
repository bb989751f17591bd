from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    """One action interval in normalised (center, width) form."""
    center: float
    width: float
    class_id: int = 0
    score: float = 1.0

    @property
    def start(self):
        return min(1.0, max(0.0, self.center - self.width / 2.0))

    @property
    def end(self):
        return min(1.0, max(0.0, self.center + self.width / 2.0))

    @classmethod
    def from_bounds(cls, start, end, class_id=0, score=1.0):
        return cls(center=(start + end) / 2.0, width=end - start, class_id=int(class_id), score=float(score))

    def to_dict(self):
        return {"start": self.start, "end": self.end, "class": self.class_id, "score": self.score}


def interval_iou(a_start, a_end, b_start, b_end):
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    if union <= 0.0:
        return 1.0 if (a_start, a_end) == (b_start, b_end) else 0.0
    return inter / union


def segment_iou(a, b):
    """Temporal IoU of two segments in [0, 1]."""
    return interval_iou(a.start, a.end, b.start, b.end)


def iou_matrix(starts_a, ends_a, starts_b, ends_b):
    """Pairwise IoU between interval sets a (rows) and b (columns)."""
    sa, ea = np.asarray(starts_a, float)[:, None], np.asarray(ends_a, float)[:, None]
    sb, eb = np.asarray(starts_b, float)[None, :], np.asarray(ends_b, float)[None, :]
    inter = np.clip(np.minimum(ea, eb) - np.maximum(sa, sb), 0.0, None)
    union = (ea - sa) + (eb - sb) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    same = (sa == sb) & (ea == eb)
    return np.where((union <= 0) & same, 1.0, iou)
