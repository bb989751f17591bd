"""
Header-line + float64 payload files.

Layout: one UTF-8 JSON object with sorted keys, a single ``\\n``, then the
little-endian float64 values of every tensor listed in ``header["tensors"]``
concatenated in that order. Feature files use the same framing with a
single unnamed tensor.
"""

import json
import logging
from pathlib import Path

import numpy as np

from core.exceptions import DataFormatError

logger = logging.getLogger(__name__)

DTYPE = "<f8"
CHECKPOINT_FORMAT = "selfdetr-checkpoint"
VERSION = 1


def write_framed(path, header, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(line + b"\n")
        for array in arrays:
            fh.write(np.ascontiguousarray(array, dtype=DTYPE).tobytes())
    return path


def read_framed(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    cut = raw.find(b"\n")
    if cut < 0:
        raise DataFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise DataFormatError(f"{path}: header must be a JSON object, got {type(header).__name__}")
    payload = raw[cut + 1:]
    if len(payload) % 8:
        raise DataFormatError(f"{path}: payload of {len(payload)} bytes is not a whole number of float64 values")
    return header, np.frombuffer(payload, dtype=DTYPE)


def save_checkpoint(path, tensors, config, config_hash, seed, epoch=0, step=0):
    """Write named tensors plus the experiment config to ``path``."""
    names = list(tensors)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "dtype": DTYPE,
        "config": config,
        "config_hash": config_hash,
        "seed": seed,
        "epoch": epoch,
        "step": step,
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    path = write_framed(path, header, [tensors[n] for n in names])
    logger.info("checkpoint saved path=%s tensors=%d epoch=%d", path, len(names), epoch)
    return path


def load_checkpoint(path):
    header, payload = read_framed(path)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("dtype") != DTYPE:
        raise DataFormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    tensors = {}
    offset = 0
    try:
        entries = [(str(e["name"]), tuple(int(d) for d in e["shape"])) for e in header["tensors"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed tensor table ({exc!r})") from exc
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        if offset + count > payload.size:
            raise DataFormatError(f"{path}: payload ends inside tensor {name}")
        tensors[name] = payload[offset:offset + count].reshape(shape).copy()
        offset += count
    if offset != payload.size:
        raise DataFormatError(f"{path}: {payload.size - offset} trailing values after the last tensor")
    return header, tensors
