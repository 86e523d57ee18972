"""Online inference with cached stage-1 attention scores.

The stage-1 queries never change at inference time (their self-attention
only sees the learned tokens), so the un-normalized cross-attention scores
split into a feature half and a positional half::

    A[tau, i] = (f_{T-tau} + s_tau) . q_i  =  f_{T-tau} . q_i  +  s_tau . q_i

The positional half ``As`` is computed once.  The feature half is a FIFO of
per-frame score vectors ``a_t`` that rides alongside the long-term queue:
each step pushes one new vector (``n0 * C`` multiplies) and assembling ``A``
is ``n0 * m_L`` additions.  With multiple heads the split is applied per
head on projected keys.

:meth:`StreamingEngine.step_reference` rebuilds every score from the raw
memory and serves as the equivalence oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import (
    MacCounter,
    add_score_macs,
    combine_heads,
    count_macs_scope,
    finish_unit,
    linear,
    self_attention_block,
    transformer_decoder_unit,
)
from .memory import MemoryState, PositionalTable, RingBuffer, downsample_index, snapshot
from .model import (
    ModelConfig,
    ModelParams,
    classify,
    decode_short_term,
    forward_window,
    stage_two,
)
from .numerics import Tensor


@dataclass
class AttentionCache:
    """Inference-time constants of the stage-1 unit plus the ``a_t`` FIFO.

    ``queries`` is the projected stage-1 query matrix (n0 x C); ``As`` holds
    one (m_L x n0) positional score matrix per head, row ``tau - m_S``;
    ``af_queue`` stores per-frame score vectors of length ``heads * n0``.
    """

    lam: Tensor
    queries: np.ndarray
    As: np.ndarray
    af_queue: RingBuffer
    key_weight: np.ndarray
    heads: int

    @property
    def n0(self) -> int:
        return self.queries.shape[0]

    def frame_scores(self, f: np.ndarray) -> np.ndarray:
        """``a_t``: per-head scores of one raw frame against every query."""
        k = f @ self.key_weight  # projection; excluded from the MAC convention
        d = k.shape[0] // self.heads
        return np.concatenate([
            self.queries[:, h * d:(h + 1) * d] @ k[h * d:(h + 1) * d]
            for h in range(self.heads)
        ])


def init_cache(params: ModelParams, table: PositionalTable, config: ModelConfig) -> AttentionCache:
    if config.encoder != "two_stage":
        raise ValueError("the attention cache applies to the two-stage encoder only")
    unit = params.stage1_unit
    cross = unit.cross
    H = config.heads
    lam = self_attention_block(params.stage1_tokens, None, unit)
    q = linear(lam, cross.wq, cross.bq).value
    pos = table[np.arange(config.m_s, config.m_s + config.m_l)]
    pos_keys = pos @ cross.wk.value
    d = config.width // H
    As = np.stack([
        pos_keys[:, h * d:(h + 1) * d] @ q[:, h * d:(h + 1) * d].T for h in range(H)
    ]) if config.m_l else np.zeros((H, 0, config.n0), dtype=q.dtype)
    return AttentionCache(
        lam=lam,
        queries=q,
        As=As,
        af_queue=RingBuffer(config.m_l, H * config.n0, q.dtype),
        key_weight=cross.wk.value,
        heads=H,
    )


@dataclass
class StepCounters:
    """Cumulative operation counts.

    ``assembly_mults`` / ``assembly_adds`` cover building the stage-1 score
    matrix; ``score_macs`` counts every query-key product in the step.
    """

    steps: int = 0
    assembly_mults: int = 0
    assembly_adds: int = 0
    score_macs: int = 0


class StreamingEngine:
    """Frame-by-frame LSTR inference for one stream.

    ``dtype`` selects 64-bit (default) or 32-bit arithmetic; parameters are
    cast once at construction.
    """

    def __init__(self, params: ModelParams, config: ModelConfig, dtype=np.float64,
                 table: PositionalTable | None = None):
        self.config = config
        self.params = params.astype(config, dtype) if params.dtype != dtype else params
        self.dtype = np.dtype(dtype)
        if table is None:
            table = PositionalTable(config.m_s + config.m_l, config.width)
        self.table = table.astype(dtype)
        self.memory = MemoryState(config.m_s, config.m_l, config.width, dtype)
        self.cache = init_cache(self.params, self.table, config) if config.encoder == "two_stage" else None
        self.counters = StepCounters()

    def reset(self):
        self.memory = MemoryState(self.config.m_s, self.config.m_l, self.config.width, self.dtype)
        if self.cache is not None:
            self.cache.af_queue = RingBuffer(self.config.m_l, self.cache.af_queue._data.shape[1], self.dtype)
        self.counters = StepCounters()

    def _push(self, f) -> None:
        f = np.asarray(f, dtype=self.dtype)
        if f.shape != (self.config.width,):
            raise ValueError(f"frame has shape {f.shape}, expected ({self.config.width},)")
        graduated = self.memory.push(f)
        if graduated is not None and self.cache is not None and self.config.m_l:
            self.cache.af_queue.push(self.cache.frame_scores(graduated))
            n = self.cache.n0 * self.config.width
            self.counters.assembly_mults += n
            add_score_macs(n)

    def prefill(self, frames) -> None:
        """Push frames without producing predictions (benchmark warm-up)."""
        for f in frames:
            self._push(f)

    def _long_index(self) -> np.ndarray:
        return downsample_index(len(self.memory.long), self.config.stride)

    def step(self, f) -> np.ndarray:
        """Push ``f`` and return per-position probabilities (oldest first).

        The newest frame's prediction is the last row.
        """
        cfg, p, cache = self.config, self.params, self.cache
        if cache is None:
            self._push_reference(f)
            return self._full_forward()
        with count_macs_scope() as mc:
            self._push(f)
            long_view, short_view = snapshot(self.memory, self.table)
            idx = self._long_index()
            if len(idx):
                n_long = len(self.memory.long)
                # As row r holds tau = m_S + r; long row j (oldest first) has tau = m_S + n_long - 1 - j
                pos_rows = (n_long - 1 - idx)
                af = cache.af_queue.ordered()[idx]
                H, n0 = cache.heads, cache.n0
                scores = []
                for h in range(H):
                    A = af[:, h * n0:(h + 1) * n0] + cache.As[h][pos_rows]
                    scores.append(Tensor(A.T))
                self.counters.assembly_adds += len(idx) * n0 * H
                unit = p.stage1_unit
                v = linear(Tensor(long_view[idx]), unit.cross.wv, unit.cross.bv)
                cross = combine_heads(scores, v, unit.cross)
                memory = finish_unit(cache.lam, cross, unit)
            else:
                memory = p.stage1_tokens
            encoded = stage_two(memory, p)
            probs = classify(decode_short_term(encoded, short_view, p, causal=True), p).value
        self._finish(mc)
        return probs

    def step_reference(self, f) -> np.ndarray:
        """Same contract as :meth:`step`, recomputing stage 1 from raw memory."""
        self._push_reference(f)
        return self._full_forward()

    def _push_reference(self, f):
        f = np.asarray(f, dtype=self.dtype)
        if f.shape != (self.config.width,):
            raise ValueError(f"frame has shape {f.shape}, expected ({self.config.width},)")
        self.memory.push(f)

    def _full_forward(self) -> np.ndarray:
        cfg, p = self.config, self.params
        long_view, short_view = snapshot(self.memory, self.table)
        idx = self._long_index()
        with count_macs_scope() as mc:
            if cfg.encoder == "two_stage":
                if len(idx):
                    lv = Tensor(long_view[idx])
                    memory = transformer_decoder_unit(p.stage1_tokens, lv, None, p.stage1_unit)
                    self.counters.assembly_mults += cfg.n0 * len(idx) * cfg.width
                    self.counters.assembly_adds += cfg.n0 * len(idx) * cfg.width
                else:
                    memory = p.stage1_tokens
                encoded = stage_two(memory, p)
                probs = classify(decode_short_term(encoded, short_view, p, causal=True), p).value
            else:
                probs = forward_window(long_view, short_view, p, cfg, causal=True).value
        self._finish(mc)
        return probs

    def _finish(self, mc: MacCounter):
        self.counters.steps += 1
        self.counters.score_macs += mc.score

    def rebuilt_af_queue(self) -> np.ndarray:
        """``a_t`` vectors recomputed from the current long-term queue."""
        frames = self.memory.long.ordered()
        if not len(frames):
            return np.zeros((0, self.cache.af_queue._data.shape[1]), dtype=self.dtype)
        return np.stack([self.cache.frame_scores(fr) for fr in frames])


def init_engine(params, config, dtype=np.float64) -> StreamingEngine:
    return StreamingEngine(params, config, dtype)


def stream(params: ModelParams, config: ModelConfig, frames: np.ndarray, mode: str = "cached",
           dtype=np.float64) -> np.ndarray:
    """Run a whole sequence; returns the newest-position vector per step."""
    if mode not in ("cached", "reference"):
        raise ValueError("mode must be 'cached' or 'reference'")
    engine = StreamingEngine(params, config, dtype)
    step = engine.step if mode == "cached" else engine.step_reference
    K1 = config.num_classes + 1
    out = np.zeros((len(frames), K1), dtype=dtype)
    for t, f in enumerate(frames):
        out[t] = step(f)[-1]
    return out
