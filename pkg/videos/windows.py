from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from core.exceptions import ConfigError, DomainError
from matching.segments import Segment
from videos.samples import VideoSample

MIN_COVERAGE = 0.5


@dataclass
class WindowConfig:
    enabled: bool = False
    size: int = 128
    overlap: int = 32
    resize_to: Optional[int] = None

    def validate(self):
        if self.size < 1 or not 0 <= self.overlap < self.size:
            raise ConfigError(f"window needs size > overlap >= 0, got size={self.size} overlap={self.overlap}")
        if self.resize_to is not None and self.resize_to < 2:
            raise ConfigError(f"window.resize_to must be >= 2, got {self.resize_to}")
        return self


@dataclass
class Window:
    """A fixed-length slice of a video; segments are window-local."""
    video_id: str
    offset: int
    size: int
    video_length: int
    features: np.ndarray
    segments: List[Segment] = field(default_factory=list)

    def as_sample(self):
        return VideoSample(id=f"{self.video_id}@{self.offset}", features=self.features, segments=self.segments)

    def to_global(self, start, end):
        """Map window-local normalised bounds back to video-normalised bounds."""
        scale = self.size / self.video_length
        base = self.offset / self.video_length
        return base + start * scale, base + end * scale


def window_starts(length, size, overlap):
    stride = size - overlap
    starts = [0]
    while starts[-1] + size < length:
        starts.append(starts[-1] + stride)
    return starts


def window_slice(sample, win=128, overlap=32):
    """
    Cut a video into windows of ``win`` frames with stride ``win - overlap``.

    The last window is padded by repeating the final frame. A ground-truth
    segment is kept in a window when at least half of its span lies inside;
    it is clipped to the window and renormalised by ``win``.
    """
    if win <= overlap:
        raise ConfigError(f"window size {win} must exceed overlap {overlap}")
    length = sample.length
    windows = []
    for offset in window_starts(length, win, overlap):
        chunk = sample.features[offset:offset + win]
        if chunk.shape[0] < win:
            pad = np.repeat(chunk[-1:], win - chunk.shape[0], axis=0)
            chunk = np.concatenate([chunk, pad], axis=0)
        lo, hi = offset, min(offset + win, length)
        local = []
        for start, end, cls in sample.frame_bounds():
            span = end - start
            clipped_start, clipped_end = max(start, lo), min(end, hi)
            inside = clipped_end - clipped_start
            if span <= 0 or inside < MIN_COVERAGE * span:
                continue
            local.append(Segment.from_bounds((clipped_start - offset) / win, (clipped_end - offset) / win, cls))
        windows.append(Window(sample.id, offset, win, length, chunk.copy(), local))
    return windows


def resize_linear(features, length=192):
    """Per-channel linear interpolation onto ``length`` evenly spaced points over [0, T-1]."""
    features = np.asarray(features, dtype=np.float64)
    frames = features.shape[0]
    if frames < 2:
        raise DomainError(f"resize_linear needs T >= 2, got {frames}")
    grid = np.arange(frames, dtype=np.float64)
    points = np.linspace(0.0, frames - 1.0, length)
    return np.stack([np.interp(points, grid, features[:, c]) for c in range(features.shape[1])], axis=1)


def resize_sample(sample, length):
    return sample.copy_with(features=resize_linear(sample.features, length))
