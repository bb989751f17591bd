"""
Experiment configuration: one dataclass per concern, serialised as a single
JSON document whose hash is embedded in every output artifact.
"""

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List

from django.conf import settings

from core.exceptions import ConfigError
from core.utils import read_json, short_hash
from detector.transformer import ModelConfig
from evaluation.inference import EvalConfig
from feedback.losses import FeedbackConfig, Guidance
from matching.criterion import LossWeights
from videos.synthetic import SynthConfig
from videos.windows import WindowConfig

# the feedback weights are stored with the other loss weights
KEY_ALIASES = {
    "feedback.lambda_e": "loss.lambda_e",
    "feedback.lambda_d": "loss.lambda_d",
}


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_fractions: List[float] = field(default_factory=lambda: [2.0 / 3.0, 5.0 / 6.0])
    decay_factor: float = 0.1
    clip_norm: float = 0.1

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"optimizer.lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        return self

    def lr_at(self, epoch, epochs):
        """Step schedule: multiply by ``decay_factor`` at each milestone fraction of training."""
        milestones = [round(f * epochs) for f in self.decay_fractions]
        return self.lr * self.decay_factor ** sum(1 for m in milestones if epoch >= m)


SECTIONS = {
    "model": ModelConfig,
    "loss": LossWeights,
    "feedback": FeedbackConfig,
    "data": SynthConfig,
    "window": WindowConfig,
    "optimizer": OptimizerConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 10
    output_dir: str = ""

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for name, value in data.items():
            if name in SECTIONS:
                section = SECTIONS[name]
                allowed = {f.name for f in fields(section)}
                bad = sorted(set(value) - allowed)
                if bad:
                    raise ConfigError(f"unknown keys in {name}: {bad}")
                kwargs[name] = section(**value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(read_json(path))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self):
        return asdict(self)

    def copy(self):
        return copy.deepcopy(self)

    @property
    def config_hash(self):
        data = self.to_dict()
        data.pop("output_dir")
        return short_hash(data)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("epochs, batch_size and checkpoint_every must be >= 1")
        if self.model.num_classes != self.data.num_classes or self.model.feature_dim != self.data.feature_dim:
            raise ConfigError(
                f"model expects {self.model.num_classes} classes x {self.model.feature_dim} channels, "
                f"data has {self.data.num_classes} x {self.data.feature_dim}"
            )
        if self.model.num_queries < self.data.max_instances:
            raise ConfigError(
                f"model.num_queries {self.model.num_queries} is below data.max_instances {self.data.max_instances}"
            )
        return self

    def sync_with_manifest(self, manifest):
        """Adopt the data section and class/channel counts of a generated dataset."""
        self.data = SynthConfig(**manifest["config"])
        self.model.num_classes = int(manifest["num_classes"])
        self.model.feature_dim = int(manifest["feature_dim"])
        return self

    def set(self, key, value):
        """Set ``section.key`` (or a top-level key), coercing to the current field type."""
        key = KEY_ALIASES.get(key, key)
        parts = key.split(".")
        target = self
        for part in parts[:-1]:
            if part not in SECTIONS or not hasattr(target, part):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        names = {f.name for f in fields(target)}
        if leaf not in names:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, leaf, _coerce(getattr(target, leaf), value, key))
        return self

    def run_dir(self):
        if self.output_dir:
            return Path(self.output_dir)
        return Path(settings.SELFDETR_OUTPUT_ROOT) / f"{self.config_hash}_s{self.seed}"

    def apply_variant(self, variant):
        """Table-3 style feedback variants: baseline, encoder, decoder, both."""
        if variant == "baseline":
            self.feedback.guidance = Guidance.OFF.value
        elif variant == "encoder":
            self.feedback.use_decoder_feedback = False
        elif variant == "decoder":
            self.feedback.use_encoder_feedback = False
        elif variant != "both":
            raise ConfigError(f"unknown variant {variant!r}")
        return self


def parse_value(text):
    """JSON if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(current, value, key):
    if isinstance(value, str) and not isinstance(current, str):
        value = parse_value(value)
    if value is None or current is None:
        return value
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(current, int) and not isinstance(value, bool):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            return list(value) if isinstance(value, (list, tuple)) else [value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {key}") from exc
    return value
