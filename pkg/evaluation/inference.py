import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List

from autodiff.engine import no_grad
from core.exceptions import ConfigError
from core.utils import read_json, write_json
from evaluation.metrics import DEFAULT_THRESHOLDS, segments_from_records
from evaluation.nms import Decay, soft_nms
from matching.segments import Segment
from videos.windows import window_slice

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    thresholds: List[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    nms: bool = True
    iou_thresh: float = 0.40
    decay: str = Decay.LINEAR.value
    sigma: float = 0.5
    top_k: int = 100

    def validate(self):
        if not self.thresholds or any(not 0.0 < t <= 1.0 for t in self.thresholds):
            raise ConfigError(f"eval.thresholds must lie in (0, 1], got {self.thresholds}")
        if self.decay not in Decay.values:
            raise ConfigError(f"eval.decay must be one of {Decay.values}, got {self.decay!r}")
        if self.top_k < 1:
            raise ConfigError("eval.top_k must be >= 1")
        return self


def detections_from_prediction(prediction, to_global=None):
    """Every (query, foreground class) pair as a scored segment."""
    probs = prediction.probabilities()[:, :-1]
    segments = prediction.segments.values
    detections = []
    for q in range(probs.shape[0]):
        center, width = segments[q]
        start, end = center - width / 2.0, center + width / 2.0
        if to_global is not None:
            start, end = to_global(start, end)
        start, end = min(1.0, max(0.0, start)), min(1.0, max(0.0, end))
        for cls in range(probs.shape[1]):
            detections.append(Segment.from_bounds(start, end, cls, float(probs[q, cls])))
    return detections


def postprocess(detections, config):
    """Per-class SoftNMS, then the overall top_k by score."""
    if config.nms:
        by_class = {}
        for det in detections:
            by_class.setdefault(det.class_id, []).append(det)
        detections = [
            det
            for cls in sorted(by_class)
            for det in soft_nms(by_class[cls], config.iou_thresh, config.top_k, config.decay, config.sigma)
        ]
    detections = sorted(detections, key=lambda s: (-s.score, s.start, s.end, s.class_id))
    return detections[:config.top_k]


def predict_video(model, sample, config, window=None):
    """Detections for one video in video-normalised coordinates."""
    with no_grad():
        if window is not None and window.enabled:
            detections = []
            for piece in window_slice(sample, window.size, window.overlap):
                predictions, _ = model.forward(piece.features)
                detections.extend(detections_from_prediction(predictions[-1], piece.to_global))
        else:
            predictions, _ = model.forward(sample.features)
            detections = detections_from_prediction(predictions[-1])
    return postprocess(detections, config)


def run_inference(model, samples, config, window=None, threads=1):
    """Detections per video id; videos fan out over ``threads`` workers in stable order."""
    def work(sample):
        return sample.id, predict_video(model, sample, config, window)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(work, samples))
    else:
        pairs = [work(s) for s in samples]
    logger.info("inference done videos=%d", len(pairs))
    return dict(pairs)


def ground_truth(samples):
    return {s.id: list(s.segments) for s in samples}


def write_results(path, results, config_hash, seed):
    payload = {
        "config_hash": config_hash,
        "seed": seed,
        "videos": [
            {"id": vid, "detections": [d.to_dict() for d in results[vid]]}
            for vid in sorted(results)
        ],
    }
    return write_json(path, payload)


def read_results(path):
    payload = read_json(path)
    results = {v["id"]: segments_from_records(v["detections"]) for v in payload["videos"]}
    return results, payload
