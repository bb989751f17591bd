"""
Synthetic untrimmed videos.

Background frames are Gaussian noise; every action instance adds its class
pattern over its frames, faded in and out over ``ramp_frames`` at each
boundary. Instances never overlap and keep at least ``min_gap`` frames
between them. Everything is derived from ``SynthConfig.seed``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from core.exceptions import ConfigError
from matching.segments import Segment
from videos.samples import VideoSample

logger = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    T: int = 64
    feature_dim: int = 32
    num_classes: int = 5
    min_instances: int = 1
    max_instances: int = 5
    min_width: float = 0.05
    max_width: float = 0.4
    min_gap: int = 2
    ramp_frames: int = 2
    noise_std: float = 0.5
    pattern_scale: float = 1.0
    train_size: int = 200
    test_size: int = 64
    seed: int = 0

    @property
    def min_width_frames(self):
        return max(1, math.ceil(self.min_width * self.T))

    @property
    def max_width_frames(self):
        return max(self.min_width_frames, math.floor(self.max_width * self.T))

    def validate(self):
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ConfigError(
                f"data needs 1 <= min_instances <= max_instances, got {self.min_instances}..{self.max_instances}"
            )
        if self.T < 1 or self.feature_dim < 1 or self.num_classes < 1:
            raise ConfigError("data.T, feature_dim and num_classes must be positive")
        if not 0.0 < self.min_width <= self.max_width < 1.0:
            raise ConfigError(f"data widths must satisfy 0 < min_width <= max_width < 1")
        if self.min_gap < 0 or self.ramp_frames < 0 or self.noise_std < 0:
            raise ConfigError("data.min_gap, ramp_frames and noise_std must be >= 0")
        if self.max_instances * (self.min_width_frames + self.min_gap) > self.T:
            raise ConfigError(
                f"cannot pack {self.max_instances} instances of {self.min_width_frames} frames "
                f"with gap {self.min_gap} into T={self.T}"
            )
        if self.train_size < 0 or self.test_size < 0:
            raise ConfigError("data split sizes must be >= 0")
        return self


@dataclass
class SyntheticDataset:
    config: SynthConfig
    patterns: np.ndarray
    splits: Dict[str, List[VideoSample]] = field(default_factory=dict)


def _place_instances(cfg, rng):
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    widths = rng.integers(cfg.min_width_frames, cfg.max_width_frames + 1, size=count)
    while widths.sum() + cfg.min_gap * (count - 1) > cfg.T:
        widths[int(np.argmax(widths))] -= 1
    free = cfg.T - int(widths.sum()) - cfg.min_gap * (count - 1)
    slack = rng.multinomial(free, [1.0 / (count + 1)] * (count + 1))
    bounds = []
    position = int(slack[0])
    for k in range(count):
        start = position
        end = start + int(widths[k])
        bounds.append((start, end))
        position = end + cfg.min_gap + int(slack[k + 1])
    return bounds


def _ramp(length, ramp_frames):
    t = np.arange(length)
    steps = np.minimum(np.minimum(t + 1, length - t), ramp_frames + 1)
    return steps / (ramp_frames + 1)


def generate_video(cfg, patterns, rng, video_id):
    features = rng.normal(0.0, cfg.noise_std, size=(cfg.T, cfg.feature_dim))
    segments = []
    for start, end in _place_instances(cfg, rng):
        class_id = int(rng.integers(0, cfg.num_classes))
        features[start:end] += _ramp(end - start, cfg.ramp_frames)[:, None] * patterns[class_id]
        segments.append(Segment.from_bounds(start / cfg.T, end / cfg.T, class_id))
    return VideoSample(id=video_id, features=features, segments=segments)


def generate_synthetic(cfg):
    """Build the train and test splits for ``cfg``; bitwise reproducible per seed."""
    cfg.validate()
    pattern_seq, train_seq, test_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    patterns = np.random.default_rng(pattern_seq).normal(0.0, cfg.pattern_scale, size=(cfg.num_classes, cfg.feature_dim))
    dataset = SyntheticDataset(config=cfg, patterns=patterns)
    for split, seq, size in (("train", train_seq, cfg.train_size), ("test", test_seq, cfg.test_size)):
        dataset.splits[split] = [
            generate_video(cfg, patterns, np.random.default_rng(child), f"{split}_{i:04d}")
            for i, child in enumerate(seq.spawn(size))
        ]
    logger.info(
        "synthetic dataset generated seed=%d train=%d test=%d T=%d",
        cfg.seed, cfg.train_size, cfg.test_size, cfg.T,
    )
    return dataset
