"""
Training loop: seeded batches prefetched on a background thread, one Adam
step per batch on the mean sample loss, JSON-lines metrics and framed
checkpoints that carry the optimizer moments so resume is exact.
"""

import logging
import queue
import threading
from contextlib import closing
from pathlib import Path

import numpy as np
from django.conf import settings

from autodiff import ops
from autodiff.checkpoint import load_checkpoint, save_checkpoint
from autodiff.optim import Adam
from core.exceptions import DataFormatError, TrainingDivergedError
from core.utils import JsonLinesWriter, write_json
from detector.transformer import TemporalDetector
from experiments.config import ExperimentConfig
from feedback.losses import compute_feedback
from matching.criterion import detr_loss, total_loss
from videos.windows import window_slice

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "final.ckpt"


def checkpoint_name(epoch):
    return f"checkpoint_e{epoch:04d}.ckpt"


def sample_loss(model, sample, config, rng=None):
    """Total objective of one video plus its logged components."""
    predictions, bundle = model.forward(sample.features, rng=rng)
    detr, info = detr_loss(predictions, list(sample.segments), config.loss)
    fb_enc, fb_dec = compute_feedback(bundle, config.feedback)
    total = total_loss(detr, fb_enc, fb_dec, config.loss)
    parts = {"detr": detr.item(), "fb_enc": fb_enc.item(), "fb_dec": fb_dec.item()}
    parts.update(info["last_layer"])
    return total, parts


def training_samples(samples, window):
    """Windowed training pieces when windowing is on, otherwise the videos themselves."""
    if window is None or not window.enabled:
        return list(samples)
    return [piece.as_sample() for s in samples for piece in window_slice(s, window.size, window.overlap)]


def epoch_batches(num_samples, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(num_samples)
    return [order[i:i + batch_size] for i in range(0, num_samples, batch_size)]


class Prefetcher:
    """Yield items produced on a daemon thread through a bounded queue."""

    _DONE = object()

    def __init__(self, produce, size=None):
        self.produce = produce
        self.size = size or settings.SELFDETR_PREFETCH
        self._stop = threading.Event()
        self.worker = None

    def _put(self, q, item):
        """Block until ``item`` is queued or the consumer has gone; False in the latter case."""
        while not self._stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, q):
        try:
            for item in self.produce():
                if not self._put(q, item):
                    return
        except Exception as exc:  # handed to the consumer
            self._put(q, exc)
        finally:
            self._put(q, self._DONE)

    def __iter__(self):
        q = queue.Queue(maxsize=self.size)
        self.worker = threading.Thread(target=self._run, args=(q,), daemon=True)
        self.worker.start()
        try:
            while True:
                item = q.get()
                if item is self._DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self._stop.set()


class Trainer:
    def __init__(self, config, train_samples, run_dir=None):
        self.config = config.validate()
        self.samples = training_samples(train_samples, config.window)
        if not self.samples:
            raise DataFormatError("training split is empty")
        self.run_dir = Path(run_dir) if run_dir else config.run_dir()
        self.model = TemporalDetector(config.model, seed=config.seed)
        opt = config.optimizer
        self.optimizer = Adam(
            self.model.params, lr=opt.lr, betas=(opt.beta1, opt.beta2), eps=opt.eps, clip_norm=opt.clip_norm
        )
        self.start_epoch = 0
        self.step = 0
        self.final_path = None

    @property
    def config_hash(self):
        return self.config.config_hash

    def resume(self, path):
        header, tensors = load_checkpoint(path)
        if header.get("config_hash") != self.config_hash:
            raise DataFormatError(
                f"checkpoint {path} was written by config {header.get('config_hash')}, current config is {self.config_hash}"
            )
        self.model.load_state_dict(tensors)
        self.optimizer.load_state(header["step"], tensors)
        self.start_epoch = int(header["epoch"])
        self.step = int(header["step"])
        logger.info("resumed path=%s epoch=%d step=%d", path, self.start_epoch, self.step)
        return self

    def save(self, name, epoch):
        tensors = dict(self.model.state_dict())
        tensors.update(self.optimizer.state_tensors())
        return save_checkpoint(
            self.run_dir / name, tensors, self.config.to_dict(), self.config_hash,
            self.config.seed, epoch=epoch, step=self.step,
        )

    def train_step(self, batch, epoch):
        """Forward, backward and one optimizer update on ``batch``; returns the step record."""
        self.optimizer.lr = self.config.optimizer.lr_at(epoch, self.config.epochs)
        self.optimizer.zero_grad()
        rng = np.random.default_rng([self.config.seed, epoch, self.step]) if self.config.model.dropout else None
        losses, records = [], []
        try:
            for sample in batch:
                loss, parts = sample_loss(self.model, sample, self.config, rng)
                losses.append(loss)
                records.append(parts)
            loss = ops.scale(ops.add_n(losses), 1.0 / len(losses))
            loss.backward()
            grad_norm = self.optimizer.step()
        except TrainingDivergedError as exc:
            exc.step = self.step
            raise
        record = {key: float(np.mean([r[key] for r in records])) for key in records[0]}
        record.update(kind="step", epoch=epoch, step=self.step, loss=loss.item(),
                      grad_norm=grad_norm, lr=self.optimizer.lr)
        self.step += 1
        return record

    def _batches(self, epoch):
        for indices in epoch_batches(len(self.samples), self.config.batch_size, self.config.seed, epoch):
            yield [self.samples[i] for i in indices]

    def fit(self, stop_after=None):
        """
        Train from ``start_epoch`` to ``config.epochs``. ``stop_after`` ends the
        run after that many optimizer steps without writing a final checkpoint.
        Returns the list of records written to the metrics log.
        """
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.run_dir / "config.json", {"config": cfg.to_dict(), "config_hash": self.config_hash, "seed": cfg.seed})
        history = []
        taken = 0
        mode = "a" if self.step else "w"
        with JsonLinesWriter(self.run_dir / METRICS_FILE, mode=mode) as log:
            for epoch in range(self.start_epoch, cfg.epochs):
                steps = []
                with closing(iter(Prefetcher(lambda e=epoch: self._batches(e)))) as batches:
                    for batch in batches:
                        record = self.train_step(batch, epoch)
                        record.update(config_hash=self.config_hash, seed=cfg.seed)
                        log.write(record)
                        history.append(record)
                        steps.append(record)
                        taken += 1
                        logger.debug("step=%d loss=%.6g", record["step"], record["loss"])
                        if stop_after is not None and taken >= stop_after:
                            return history
                summary = {
                    key: float(np.mean([s[key] for s in steps]))
                    for key in ("loss", "detr", "fb_enc", "fb_dec", "cls", "l1", "iou", "grad_norm")
                }
                summary.update(kind="epoch", epoch=epoch, step=self.step, lr=self.optimizer.lr,
                               config_hash=self.config_hash, seed=cfg.seed)
                log.write(summary)
                history.append(summary)
                logger.info(
                    "epoch=%d loss=%.6g detr=%.6g fb_enc=%.6g fb_dec=%.6g",
                    epoch, summary["loss"], summary["detr"], summary["fb_enc"], summary["fb_dec"],
                )
                if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                    self.save(checkpoint_name(epoch + 1), epoch + 1)
        self.final_path = self.save(FINAL_CHECKPOINT, cfg.epochs)
        return history


def load_model(path, config=None):
    """Rebuild a detector from a checkpoint; returns (model, header, config)."""
    header, tensors = load_checkpoint(path)
    if not isinstance(header.get("config"), dict):
        raise DataFormatError(f"{path}: checkpoint carries no experiment config")
    stored = ExperimentConfig.from_dict(header["config"])
    model = TemporalDetector(stored.model, seed=header.get("seed", 0))
    model.load_state_dict(tensors)
    if config is not None and config.config_hash != header.get("config_hash"):
        logger.warning("config hash %s differs from checkpoint %s", config.config_hash, header.get("config_hash"))
    return model, header, stored
