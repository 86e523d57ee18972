"""Window sampling, per-frame supervision and the optimization loop."""

from __future__ import annotations

import logging
import functools
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .memory import sinusoid
from .model import ModelConfig, ModelParams, forward_window
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class LabeledSequence:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a (steps, width) matrix")
        if len(self.labels) != len(self.features):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def check_labels(self, num_classes: int):
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > num_classes):
            raise ValueError(f"labels must lie in 0..{num_classes}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.  Defaults are the full-scale recipe; desk-scale
    runs usually raise ``lr`` by one or two orders of magnitude."""

    batch_size: int = 16
    epochs: int = 25
    lr: float = 5e-5
    weight_decay: float = 5e-5
    warmup_fraction: float = 0.4
    seed: int = 0
    windows_per_sequence: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("batch_size", "epochs", "windows_per_sequence"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.lr <= 0:
            out.append("lr must be > 0")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if not 0 < self.warmup_fraction < 1:
            out.append("warmup_fraction must lie in (0, 1)")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


# ------------------------------------------------------------------ windows


@functools.lru_cache(maxsize=8)
def _positions(length: int, width: int) -> np.ndarray:
    return sinusoid(length, width)


def window_at(seq: LabeledSequence, end: int, config: ModelConfig):
    """Memory views after ``end`` frames have been pushed (frames ``0..end-1``).

    Rows carry their relative-age encodings, exactly as a memory snapshot
    taken at that moment would.
    """
    m_s, m_l = config.m_s, config.m_l
    if not m_s <= end <= len(seq):
        raise ValueError(f"window end {end} outside [{m_s}, {len(seq)}]")
    start_long = max(0, end - m_s - m_l)
    rows = seq.features[start_long:end]
    ages = end - 1 - np.arange(start_long, end)
    views = rows + _positions(m_s + m_l, config.width)[ages]
    split = len(rows) - m_s
    return views[:split], views[split:], seq.labels[end - m_s:end]


def sample_window(seq: LabeledSequence, config: ModelConfig, rng: np.random.Generator):
    """Uniformly pick an ending time and return (long_view, short_view, labels)."""
    if len(seq) < config.m_s:
        raise ValueError(f"sequence of {len(seq)} steps is shorter than m_S={config.m_s}")
    end = int(rng.integers(config.m_s, len(seq) + 1))
    return window_at(seq, end, config)


# --------------------------------------------------------------------- loss


def sequence_loss(pred, labels) -> Tensor:
    """Summed cross-entropy over every short-term position.

    ``pred`` is a (positions, K+1) probability matrix (Tensor or array).
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (pred.rows,):
        raise ValueError(f"{pred.rows} predictions but labels of shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= pred.cols:
        raise ValueError(f"labels must lie in 0..{pred.cols - 1}")
    return nx.scale(nx.sum_all(nx.log(nx.pick(pred, labels), PROB_FLOOR)), -1.0)


def window_loss(params: ModelParams, config: ModelConfig, long_view, short_view, labels):
    probs = forward_window(long_view, short_view, params, config, causal=True)
    return sequence_loss(probs, labels), probs


# --------------------------------------------------------------- optimizer


def learning_rate(iteration: int, total: int, peak: float, warmup_fraction: float) -> float:
    """Linear warm-up from zero to ``peak``, then cosine decay to zero."""
    warm = warmup_fraction * total
    if iteration < warm:
        return peak * iteration / warm
    span = max(total - warm, 1e-12)
    progress = min((iteration - warm) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, values: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in values.items()}
        self.v = {k: np.zeros_like(v) for k, v in values.items()}
        self.t = 0

    def update(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        out = {}
        for k, p in values.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            step = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - lr * (step + self.weight_decay * p)
        return out


# -------------------------------------------------------------------- loop


def batch_gradient(params: ModelParams, config: ModelConfig, windows):
    """Mean window loss over ``windows`` and its gradient for every tensor."""
    named = params.named_tensors()
    names = list(named)
    leaves = [named[k] for k in names]
    total = {k: np.zeros_like(t.value) for k, t in named.items()}
    loss_sum, correct, count = 0.0, 0, 0
    for long_view, short_view, labels in windows:
        with Tape() as tape:
            loss, probs = window_loss(params, config, long_view, short_view, labels)
        grads = tape.gradient(loss, leaves)
        for k, g in zip(names, grads):
            total[k] += g
        loss_sum += float(loss.value[0, 0])
        correct += int((probs.value.argmax(axis=1) == labels).sum())
        count += len(labels)
    n = len(windows)
    return loss_sum / n, {k: g / n for k, g in total.items()}, correct, count


def fit(dataset: list[LabeledSequence], config: TrainConfig, model_config: ModelConfig,
        params: ModelParams | None = None, callback=None):
    """Train on randomly sampled windows.  Returns ``(params, history)``.

    One epoch draws ``windows_per_sequence`` windows from every sequence.
    ``history`` holds one dict per epoch (mean loss, frame accuracy, last lr).
    ``callback(epoch, params, record)`` runs after each epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for seq in dataset:
        seq.check_labels(model_config.num_classes)
        if seq.features.shape[1] != model_config.width:
            raise ValueError(f"feature width {seq.features.shape[1]} != model width {model_config.width}")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = ModelParams.init(model_config, seed=config.seed)
    values = {k: t.value.copy() for k, t in params.named_tensors().items()}
    opt = AdamW(values, config.beta1, config.beta2, config.adam_eps, config.weight_decay)

    per_epoch = len(dataset) * config.windows_per_sequence
    batches = math.ceil(per_epoch / config.batch_size)
    total_iters = batches * config.epochs
    history = []
    it = 0
    for epoch in range(config.epochs):
        order = np.repeat(np.arange(len(dataset)), config.windows_per_sequence)
        rng.shuffle(order)
        loss_sum, correct, count, lr = 0.0, 0, 0, 0.0
        for b in range(batches):
            chunk = order[b * config.batch_size:(b + 1) * config.batch_size]
            windows = [sample_window(dataset[i], model_config, rng) for i in chunk]
            loss, grads, c, n = batch_gradient(params, model_config, windows)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", params, history)
            lr = learning_rate(it, total_iters, config.lr, config.warmup_fraction)
            values = opt.update(values, grads, lr)
            params = params.replace_values(model_config, values)
            loss_sum += loss * len(chunk)
            correct += c
            count += n
            it += 1
        record = {"epoch": epoch + 1, "loss": loss_sum / per_epoch,
                  "accuracy": correct / count, "lr": lr}
        history.append(record)
        log.info("epoch %d loss %.4f acc %.4f", record["epoch"], record["loss"], record["accuracy"])
        if callback is not None:
            callback(epoch, params, record)
    return params, history


# ---------------------------------------------------------- synthetic task


@dataclass
class TriggerTask:
    """Long-dependency toy problem.

    A short burst along one of ``num_classes`` trigger directions is followed,
    ``lag`` steps later, by ``duration`` frames of a class-agnostic activity
    direction.  Those frames are labelled with the trigger's class, so the
    short-term window tells *when* an action happens but only the long-term
    memory tells *which*.
    """

    width: int = 32
    num_classes: int = 2
    lag: tuple[int, int] = (32, 200)
    duration: int = 16
    trigger_len: int = 1
    trigger_scale: float = 8.0
    activity_scale: float = 5.0
    lead: tuple[int, int] = (0, 16)
    tail: tuple[int, int] = (0, 8)
    seed: int = 0
    directions: np.ndarray = field(init=False, repr=False)
    activity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        basis, _ = np.linalg.qr(rng.standard_normal((self.width, self.num_classes + 1)))
        self.directions = basis[:, : self.num_classes].T
        self.activity = basis[:, self.num_classes]

    def sample(self, n: int, seed: int) -> list[LabeledSequence]:
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            t0 = int(rng.integers(self.lead[0], self.lead[1] + 1))
            lag = int(rng.integers(self.lag[0], self.lag[1] + 1))
            tail = int(rng.integers(self.tail[0], self.tail[1] + 1))
            k = int(rng.integers(self.num_classes))
            start = t0 + lag
            length = start + self.duration + tail
            feats = rng.standard_normal((length, self.width))
            labels = np.zeros(length, dtype=np.int64)
            feats[t0:t0 + self.trigger_len] += self.trigger_scale * self.directions[k]
            feats[start:start + self.duration] += self.activity_scale * self.activity
            labels[start:start + self.duration] = k + 1
            out.append(LabeledSequence(feats, labels))
        return out


def newest_frame_accuracy(params: ModelParams, config: ModelConfig, dataset, foreground_only=True):
    """Accuracy of the newest-position prediction over every eligible step.

    Each step ``t`` is scored from the window ending at ``t`` (identical to
    what a streaming engine outputs there).  With ``foreground_only`` only
    action steps count, so chance level is ``1 / num_classes``.
    """
    correct = total = 0
    for seq in dataset:
        for end in range(config.m_s, len(seq) + 1):
            y = seq.labels[end - 1]
            if foreground_only and y == 0:
                continue
            lv, sv, _ = window_at(seq, end, config)
            probs = forward_window(lv, sv, params, config).value
            correct += int(probs[-1].argmax() == y)
            total += 1
    return correct / max(total, 1)
