import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from autodiff.engine import no_grad
from core.exceptions import DataFormatError, EmptyReportError
from core.utils import write_json
from diversity.metrics import diversity

logger = logging.getLogger(__name__)

MAP_KINDS = ("enc_self", "dec_self", "cross")


@dataclass
class DiversityReport:
    enc_self: List[float] = field(default_factory=list)
    dec_self: List[float] = field(default_factory=list)
    sample_count: int = 0
    sample_ids: List[str] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "sample_count": self.sample_count,
            "sample_ids": list(self.sample_ids),
            "enc_self": list(self.enc_self),
            "dec_self": list(self.dec_self),
        }

    def to_frame(self):
        rows = [
            {"kind": kind, "layer": layer, "diversity": value}
            for kind in ("enc_self", "dec_self")
            for layer, value in enumerate(getattr(self, kind))
        ]
        return pd.DataFrame(rows, columns=["kind", "layer", "diversity"])

    def final_layer(self, kind):
        values = getattr(self, kind)
        return values[-1] if values else None


def _sample_diversity(model, sample):
    with no_grad():
        _, bundle = model.forward(sample.features)
    return (
        [diversity(a.values) for a in bundle.enc_self],
        [diversity(a.values) for a in bundle.dec_self],
    )


def diversity_report(model, samples, sample_count, seed=0, config_hash="", threads=1):
    """
    Mean diversity per encoder and decoder self-attention layer over
    ``sample_count`` videos drawn without replacement with ``seed``.
    """
    if sample_count <= 0 or not samples:
        raise EmptyReportError("diversity report needs at least one sample")
    feature_dim = model.config.feature_dim
    for sample in samples:
        if sample.features.shape[1] != feature_dim:
            raise DataFormatError(
                f"sample {sample.id} has {sample.features.shape[1]} feature channels, checkpoint expects {feature_dim}"
            )
    if sample_count > len(samples):
        logger.warning("requested %d samples, only %d available", sample_count, len(samples))
        sample_count = len(samples)
    rng = np.random.default_rng(seed)
    chosen = [samples[i] for i in rng.choice(len(samples), size=sample_count, replace=False)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sample = list(pool.map(lambda s: _sample_diversity(model, s), chosen))
    else:
        per_sample = [_sample_diversity(model, s) for s in chosen]

    enc = np.mean([p[0] for p in per_sample], axis=0) if model.config.encoder_layers else np.zeros(0)
    dec = np.mean([p[1] for p in per_sample], axis=0) if model.config.decoder_self_attention else np.zeros(0)
    report = DiversityReport(
        enc_self=[float(v) for v in enc],
        dec_self=[float(v) for v in dec],
        sample_count=sample_count,
        sample_ids=[s.id for s in chosen],
        config_hash=config_hash,
        seed=seed,
    )
    logger.info(
        "diversity report samples=%d enc_final=%s dec_final=%s",
        sample_count, report.final_layer("enc_self"), report.final_layer("dec_self"),
    )
    return report


def export_attention(model, sample, path):
    """Write every attention map of one forward pass as ``{kind}_{layer}.csv`` plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with no_grad():
        _, bundle = model.forward(sample.features)
    entries = []
    for kind in MAP_KINDS:
        for layer, attn in enumerate(getattr(bundle, kind)):
            name = f"{kind}_{layer}.csv"
            pd.DataFrame(attn.values).to_csv(path / name, header=False, index=False, float_format="%.17g")
            entries.append({"kind": kind, "layer": layer, "file": name, "rows": attn.shape[0], "cols": attn.shape[1]})
    write_json(path / "manifest.json", {"sample_id": sample.id, "maps": entries})
    logger.info("attention exported sample=%s maps=%d path=%s", sample.id, len(entries), path)
    return entries


def load_attention_csv(path):
    return pd.read_csv(path, header=None).to_numpy(dtype=np.float64)
