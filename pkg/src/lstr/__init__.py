"""Long/short-term memory transformer for online per-step classification.

A small numpy implementation with its own reverse-mode tape, a two-stage
memory compressor, a cached streaming engine, desk-scale training and the
usual per-frame ranking metrics.
"""

from .estimator import LSTRClassifier
from .memory import MemoryState, PositionalTable, RingBuffer
from .metrics import calibrated_ap, mean_ap, per_decile_cap, per_frame_ap
from .model import ModelConfig, ModelParams, count_macs, forward_window, predict_window
from .streaming import StreamingEngine, stream
from .training import LabeledSequence, TrainConfig, TriggerTask, fit

__all__ = [
    "LSTRClassifier",
    "LabeledSequence",
    "MemoryState",
    "ModelConfig",
    "ModelParams",
    "PositionalTable",
    "RingBuffer",
    "StreamingEngine",
    "TrainConfig",
    "TriggerTask",
    "calibrated_ap",
    "count_macs",
    "fit",
    "forward_window",
    "mean_ap",
    "per_decile_cap",
    "per_frame_ap",
    "predict_window",
    "stream",
]

__version__ = "0.1.0"
