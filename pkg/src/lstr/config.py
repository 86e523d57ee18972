"""Run configuration documents (JSON).

::

    {
      "model": {"width": 32, "m_s": 16, "m_l": 256, "num_classes": 2, ...},
      "train": {"lr": 0.003, "epochs": 25, ...},
      "synthetic": {"sequences": 256, "test_sequences": 40, ...},
      "paths": {"checkpoint": "run.ckpt", "history": "history.tsv"}
    }

Validation is all-or-nothing: every problem is collected and reported
before anything runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .model import ModelConfig
from .training import TrainConfig, TriggerTask

REQUIRED_MODEL_KEYS = ("width", "m_s", "m_l", "num_classes")
SECTIONS = ("model", "train", "synthetic", "paths")
PATH_KEYS = ("checkpoint", "history")
SYNTHETIC_EXTRA = ("sequences", "test_sequences", "data_seed")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: dict | None = None
    paths: dict = field(default_factory=dict)

    def task(self) -> TriggerTask | None:
        if self.synthetic is None:
            return None
        kw = {k: v for k, v in self.synthetic.items() if k not in SYNTHETIC_EXTRA}
        for key in ("lag", "lead", "tail"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return TriggerTask(**kw)


def _typed(section: str, cls, raw, problems: list[str]) -> dict:
    out = {}
    known = {f.name: f for f in fields(cls) if f.init}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{section}.{key}: unknown key")
            continue
        ftype = str(known[key].type)
        if "tuple" in ftype:
            ok = isinstance(value, list) and len(value) == 2 and all(
                isinstance(v, int) and not isinstance(v, bool) for v in value)
        elif "bool" in ftype:
            ok = isinstance(value, bool)
        elif "float" in ftype:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif "int" in ftype:
            ok = (isinstance(value, int) and not isinstance(value, bool)) or (value is None and "None" in ftype)
        elif "str" in ftype:
            ok = isinstance(value, str)
        else:
            ok = True
        if not ok:
            problems.append(f"{section}.{key}: bad value {value!r} (expected {ftype})")
            continue
        out[key] = value
    return out


def parse_run_config(doc: dict) -> RunConfig:
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be an object"])
    for key in doc:
        if key not in SECTIONS:
            problems.append(f"{key}: unknown section")
    for key in SECTIONS:
        if key in doc and not isinstance(doc[key], dict):
            problems.append(f"{key}: must be an object")
    if problems:
        raise ConfigError(problems)

    model_raw = doc.get("model")
    if model_raw is None:
        problems.append("model: required section missing")
        model_raw = {}
    for key in REQUIRED_MODEL_KEYS:
        if key not in model_raw:
            problems.append(f"model.{key}: required key missing")
    model_kw = _typed("model", ModelConfig, model_raw, problems)
    train_kw = _typed("train", TrainConfig, doc.get("train", {}), problems)

    synthetic = doc.get("synthetic")
    if synthetic is not None:
        task_raw = {k: v for k, v in synthetic.items() if k not in SYNTHETIC_EXTRA}
        _typed("synthetic", TriggerTask, task_raw, problems)
        for key in SYNTHETIC_EXTRA:
            if key in synthetic and (not isinstance(synthetic[key], int) or synthetic[key] < 0):
                problems.append(f"synthetic.{key}: must be a non-negative integer")

    paths = doc.get("paths", {})
    for key, value in paths.items():
        if key not in PATH_KEYS:
            problems.append(f"paths.{key}: unknown key")
        elif not isinstance(value, str):
            problems.append(f"paths.{key}: must be a string")

    if not problems:
        try:
            model = ModelConfig(**model_kw)
        except ValueError as exc:
            problems.extend(f"model: {p}" for p in str(exc).split("; "))
        try:
            train = TrainConfig(**train_kw)
        except ValueError as exc:
            problems.extend(f"train: {p}" for p in str(exc).split("; "))
        if synthetic is not None and not problems:
            if synthetic.get("width", model.width) != model.width:
                problems.append("synthetic.width: must equal model.width")
            if synthetic.get("num_classes", model.num_classes) != model.num_classes:
                problems.append("synthetic.num_classes: must equal model.num_classes")
    if problems:
        raise ConfigError(problems)
    if synthetic is not None:
        synthetic = {"width": model.width, "num_classes": model.num_classes, **synthetic}
    return RunConfig(model=model, train=train, synthetic=synthetic, paths=dict(paths))


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    return parse_run_config(doc)
