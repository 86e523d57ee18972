"""Binary file formats.  All multi-byte integers and reals are little-endian.

Feature file::

    b"LSTRFEAT" | version u32 | steps u32 | width u32 | steps*width f32

Checkpoint::

    b"LSTRCKPT" | version u32 | config_len u32 | config JSON (utf-8)
    then until EOF: name_len u32 | name | rows u32 | cols u32 | rows*cols f64

Prediction dump: records of ``step u32`` followed by ``K+1`` f32 scores.

Label sidecar: text, one integer class id per line.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import ModelConfig, ModelParams

FEATURE_MAGIC = b"LSTRFEAT"
CHECKPOINT_MAGIC = b"LSTRCKPT"
VERSION = 1


class FormatError(ValueError):
    pass


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be (steps, width)")
    steps, width = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", VERSION, steps, width))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    version, steps, width = struct.unpack_from("<III", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[20:]
    if len(body) != steps * width * 4:
        raise FormatError(f"{path}: body has {len(body)} bytes, expected {steps * width * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(steps, width).astype(np.float32)


def write_labels(path, labels) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(y)}\n" for y in labels)


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        return np.array([int(x) for x in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def sidecar_path(feature_path) -> str:
    root, _ = os.path.splitext(os.fspath(feature_path))
    return root + ".labels"


def write_predictions(path, probs: np.ndarray, steps=None) -> None:
    probs = np.asarray(probs, dtype="<f4")
    if probs.ndim != 2:
        raise ValueError("predictions must be (steps, K+1)")
    steps = np.arange(len(probs)) if steps is None else np.asarray(steps)
    rec = np.dtype([("step", "<u4"), ("scores", "<f4", (probs.shape[1],))])
    arr = np.empty(len(probs), dtype=rec)
    arr["step"] = steps
    arr["scores"] = probs
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def read_predictions(path, num_scores: int | None = None, steps: int | None = None):
    """Return ``(step_index, scores)``.

    The record width comes from ``num_scores`` or, failing that, from an
    expected record count ``steps`` (e.g. the label sidecar length).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        return np.zeros(0, dtype=np.int64), np.zeros((0, num_scores or 0), dtype=np.float32)
    inferred = num_scores is None
    if inferred:
        if not steps or len(raw) % steps:
            raise FormatError(f"{path}: cannot infer record width from {len(raw)} bytes")
        num_scores = (len(raw) // steps - 4) // 4
    rec = np.dtype([("step", "<u4"), ("scores", "<f4", (num_scores,))])
    if len(raw) % rec.itemsize:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of records")
    arr = np.frombuffer(raw, dtype=rec)
    if inferred and not np.array_equal(arr["step"], np.arange(len(arr))):
        raise FormatError(f"{path}: {len(raw)} bytes do not form {steps} consecutive step records")
    return arr["step"].astype(np.int64), arr["scores"].astype(np.float32)


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name, t in params.named_tensors().items():
            key = name.encode()
            rows, cols = t.shape
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 16
    config = ModelConfig.from_dict(json.loads(raw[pos:pos + n].decode()))
    pos += n
    named = {}
    while pos < len(raw):
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + klen].decode()
        pos += klen
        rows, cols = struct.unpack_from("<II", raw, pos)
        pos += 8
        size = rows * cols * 8
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated blob {name!r}")
        named[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += size
    return config, ModelParams.from_named(config, named)
