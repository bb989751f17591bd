from dataclasses import dataclass, field
from typing import List

import numpy as np

from core.exceptions import DataFormatError
from matching.segments import Segment


@dataclass
class VideoSample:
    """A (T x D_feat) feature sequence with its ground-truth segments."""
    id: str
    features: np.ndarray
    segments: List[Segment] = field(default_factory=list)

    @property
    def length(self):
        return self.features.shape[0]

    def validate(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataFormatError(f"{self.id}: features must be (T x D) with T >= 1, got {self.features.shape}")
        for seg in self.segments:
            lo, hi = seg.center - seg.width / 2.0, seg.center + seg.width / 2.0
            if lo < -1e-12 or hi > 1.0 + 1e-12 or seg.width < 0:
                raise DataFormatError(f"{self.id}: segment {seg} lies outside [0, 1]")
        return self

    def frame_bounds(self):
        return [(seg.start * self.length, seg.end * self.length, seg.class_id) for seg in self.segments]

    def copy_with(self, features=None, segments=None, id=None):
        return VideoSample(
            id=self.id if id is None else id,
            features=self.features if features is None else np.asarray(features, dtype=np.float64),
            segments=list(self.segments if segments is None else segments),
        )
