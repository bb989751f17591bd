"""
Dataset directories: ``manifest.json`` plus one ``.feat`` and one ``.json``
annotation file per video under a directory per split.
"""

import logging
from dataclasses import asdict
from pathlib import Path

from core.exceptions import ConfigError, DataFormatError
from core.utils import read_json, short_hash, write_json
from videos.featio import load_feature_file, write_annotations, write_feature_file
from videos.windows import resize_sample

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SPLITS = ("train", "test")


def data_hash(synth_config):
    return short_hash(asdict(synth_config))


def write_dataset(root, dataset, force=False):
    """Write every split of ``dataset`` under ``root`` and return the manifest."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise ConfigError(f"{root} is not empty; pass --force to overwrite")
    cfg = dataset.config
    manifest = {
        "config": asdict(cfg),
        "data_hash": data_hash(cfg),
        "num_classes": cfg.num_classes,
        "feature_dim": cfg.feature_dim,
        "splits": {},
    }
    for split in SPLITS:
        entries = []
        for sample in dataset.splits.get(split, []):
            features = Path(split) / f"{sample.id}.feat"
            annotations = Path(split) / f"{sample.id}.json"
            write_feature_file(root / features, sample.features)
            write_annotations(root / annotations, sample)
            entries.append({
                "id": sample.id,
                "features": features.as_posix(),
                "annotations": annotations.as_posix(),
                "T": sample.length,
            })
        manifest["splits"][split] = entries
    write_json(root / MANIFEST, manifest)
    logger.info(
        "dataset written root=%s train=%d test=%d data_hash=%s",
        root, len(manifest["splits"]["train"]), len(manifest["splits"]["test"]), manifest["data_hash"],
    )
    return manifest


def read_manifest(root):
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DataFormatError(f"no {MANIFEST} in {root}")
    manifest = read_json(path)
    for key in ("splits", "num_classes", "feature_dim"):
        if key not in manifest:
            raise DataFormatError(f"{path}: missing {key!r}")
    return manifest


def load_split(root, split, resize_to=None):
    """Load every sample of ``split``; optionally resize features to a fixed length."""
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise DataFormatError(f"{root}: manifest has no split {split!r}")
    samples = []
    for entry in manifest["splits"][split]:
        sample = load_feature_file(
            root / entry["features"], root / entry["annotations"],
            num_classes=manifest["num_classes"], sample_id=entry["id"],
        )
        if resize_to:
            sample = resize_sample(sample, resize_to)
        samples.append(sample)
    logger.info("split loaded root=%s split=%s videos=%d", root, split, len(samples))
    return samples, manifest
