"""scikit-learn compatible wrapper around training and streaming inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import ModelConfig
from .streaming import stream
from .training import LabeledSequence, TrainConfig, fit


def _as_sequences(X, name="X"):
    """Accept one (steps, width) array or a list of them."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_array(X, dtype=np.float64, ensure_min_samples=0)], True
    seqs = [check_array(x, dtype=np.float64, ensure_min_samples=0) for x in X]
    if not seqs:
        raise ValueError(f"{name} holds no sequences")
    return seqs, False


def _as_label_lists(y, seqs):
    if isinstance(y, np.ndarray) and y.ndim == 1 and len(seqs) == 1:
        y = [y]
    ys = [np.asarray(v).astype(np.int64, copy=False).ravel() for v in y]
    if len(ys) != len(seqs):
        raise ValueError(f"{len(seqs)} sequences but {len(ys)} label arrays")
    for s, v in zip(seqs, ys):
        if len(s) != len(v):
            raise ValueError(f"sequence of {len(s)} steps has {len(v)} labels")
        if v.size and v.min() < 0:
            raise ValueError("class ids must be non-negative (0 is background)")
    return ys


class LSTRClassifier(ClassifierMixin, BaseEstimator):
    """Per-step online classifier over streams of feature vectors.

    ``fit`` takes a list of (steps, width) arrays with one integer label per
    step (0 = background).  ``predict_proba`` streams each sequence through
    the cached online engine and stacks the newest-step probabilities of all
    sequences row-wise.
    """

    def __init__(self, m_s=16, m_l=256, n0=16, n1=32, l_enc=2, l_dec=2, heads=4, d_ff=None,
                 stride=1, batch_size=16, epochs=25, lr=3e-3, weight_decay=1e-4,
                 warmup_fraction=0.4, windows_per_sequence=2, mode="cached", precision=64,
                 random_state=0):
        self.m_s = m_s
        self.m_l = m_l
        self.n0 = n0
        self.n1 = n1
        self.l_enc = l_enc
        self.l_dec = l_dec
        self.heads = heads
        self.d_ff = d_ff
        self.stride = stride
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_fraction = warmup_fraction
        self.windows_per_sequence = windows_per_sequence
        self.mode = mode
        self.precision = precision
        self.random_state = random_state

    def fit(self, X, y):
        seqs, _ = _as_sequences(X)
        ys = _as_label_lists(y, seqs)
        width = seqs[0].shape[1]
        if any(s.shape[1] != width for s in seqs):
            raise ValueError("all sequences must share one feature width")
        num_classes = max(1, int(max(v.max(initial=0) for v in ys)))
        self.config_ = ModelConfig(
            width=width, m_s=self.m_s, m_l=self.m_l, num_classes=num_classes, n0=self.n0,
            n1=self.n1, l_enc=self.l_enc, l_dec=self.l_dec, heads=self.heads, d_ff=self.d_ff,
            stride=self.stride,
        )
        train_cfg = TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
            weight_decay=self.weight_decay, warmup_fraction=self.warmup_fraction,
            seed=int(self.random_state or 0), windows_per_sequence=self.windows_per_sequence,
        )
        data = [LabeledSequence(s, v) for s, v in zip(seqs, ys)]
        self.params_, self.history_ = fit(data, train_cfg, self.config_)
        self.classes_ = np.arange(num_classes + 1)
        self.n_features_in_ = width
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        seqs, _ = _as_sequences(X)
        for s in seqs:
            if s.shape[1] != self.n_features_in_:
                raise ValueError(f"X has {s.shape[1]} features, expected {self.n_features_in_}")
        dtype = np.float32 if self.precision == 32 else np.float64
        out = [stream(self.params_, self.config_, s, mode=self.mode, dtype=dtype) for s in seqs]
        return np.concatenate(out, axis=0)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def score(self, X, y, sample_weight=None):
        seqs, _ = _as_sequences(X)
        ys = _as_label_lists(y, seqs)
        truth = np.concatenate(ys)
        return float(np.average(self.predict(seqs) == truth, weights=sample_weight))
