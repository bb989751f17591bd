"""
Precomputed feature files.

A ``.feat`` file is one JSON header line ``{"D_feat", "T", "dtype": "<f8",
"format": "selfdetr-features", "version": 1}`` followed by T*D_feat
little-endian float64 values in row-major order. Annotations are a JSON
list of ``{"start", "end", "class"}`` in frame units.
"""

import json
from pathlib import Path

import numpy as np

from autodiff.checkpoint import DTYPE, read_framed, write_framed
from core.exceptions import DataFormatError
from matching.segments import Segment
from videos.samples import VideoSample

FEATURE_FORMAT = "selfdetr-features"


def write_feature_file(path, features):
    features = np.asarray(features, dtype=np.float64)
    length, dim = features.shape
    header = {"format": FEATURE_FORMAT, "version": 1, "dtype": DTYPE, "T": int(length), "D_feat": int(dim)}
    return write_framed(path, header, [features])


def read_feature_file(path):
    header, payload = read_framed(path)
    if header.get("format") != FEATURE_FORMAT or header.get("dtype") != DTYPE:
        raise DataFormatError(f"{path}: not a {FEATURE_FORMAT} file")
    try:
        length, dim = int(header["T"]), int(header["D_feat"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: header lacks T/D_feat") from exc
    if payload.size != length * dim:
        raise DataFormatError(f"{path}: header says {length}x{dim} values, payload has {payload.size}")
    return payload.reshape(length, dim).copy()


def write_annotations(path, sample):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [
        {"start": round(start, 10), "end": round(end, 10), "class": int(cls)}
        for start, end, cls in sample.frame_bounds()
    ]
    path.write_text(json.dumps(records, sort_keys=True) + "\n", encoding="utf-8")
    return path


def parse_annotations(records, length, num_classes=None, source="annotations"):
    if not isinstance(records, list):
        raise DataFormatError(f"{source}: expected a JSON list of intervals")
    segments = []
    for k, rec in enumerate(records):
        try:
            start, end, cls = float(rec["start"]), float(rec["end"]), int(rec["class"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{source}[{k}]: needs numeric start, end and class") from exc
        if end < start:
            raise DataFormatError(f"{source}[{k}]: end {end} before start {start}")
        lo, hi = start / length, end / length
        if lo < 0.0 or hi > 1.0:
            raise DataFormatError(f"{source}[{k}]: interval [{lo:.4f}, {hi:.4f}] outside [0, 1]")
        if cls < 0 or (num_classes is not None and cls >= num_classes):
            raise DataFormatError(f"{source}[{k}]: unknown class id {cls}")
        segments.append(Segment.from_bounds(lo, hi, cls))
    return segments


def load_feature_file(feature_path, annotation_path, num_classes=None, sample_id=None):
    """Read one video's features and annotations as a validated :class:`VideoSample`."""
    features = read_feature_file(feature_path)
    try:
        records = json.loads(Path(annotation_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{annotation_path}: {exc}") from exc
    segments = parse_annotations(records, features.shape[0], num_classes, source=str(annotation_path))
    sample_id = sample_id or Path(feature_path).stem
    return VideoSample(id=sample_id, features=features, segments=segments).validate()
