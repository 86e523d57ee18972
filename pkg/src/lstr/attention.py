"""Multi-head attention and the Transformer decoder unit.

Weights follow the ``x @ W + b`` convention (``W`` is fan_in x fan_out,
``b`` is a single row).  Units use the post-norm residual arrangement:

    x = LN(tokens + SelfAttn(tokens))
    x = LN(x + CrossAttn(x, inputs))
    x = LN(x + FFN(x))
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LN_EPS = 1e-5


# ------------------------------------------------------------- MAC counting


@dataclass
class MacCounter:
    """Attention-interaction multiply counts.

    ``score`` counts query-key products only (projections, feed-forward and
    weighted sums are excluded on every path alike).
    """

    score: int = 0

    def reset(self):
        self.score = 0


_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "lstr_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs_scope(counter: MacCounter | None = None) -> Iterator[MacCounter]:
    counter = MacCounter() if counter is None else counter
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def add_score_macs(n: int):
    counter = _counter.get()
    if counter is not None:
        counter.score += int(n)


# --------------------------------------------------------------- parameters


def _init_weight(rng, fan_in, fan_out, dtype):
    return Tensor((rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype))


def _zeros(n, dtype):
    return Tensor(np.zeros((1, n), dtype=dtype))


def _ones(n, dtype):
    return Tensor(np.ones((1, n), dtype=dtype))


@dataclass(frozen=True)
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, rng, width, dtype=np.float64):
        return cls(
            wq=_init_weight(rng, width, width, dtype), bq=_zeros(width, dtype),
            wk=_init_weight(rng, width, width, dtype),
            wv=_init_weight(rng, width, width, dtype), bv=_zeros(width, dtype),
            wo=_init_weight(rng, width, width, dtype), bo=_zeros(width, dtype),
        )

    @property
    def width(self) -> int:
        return self.wq.rows


@dataclass(frozen=True)
class DecoderUnitParams:
    """Weights of one unit.  ``cross`` is None for a self-attention-only unit."""

    heads: int
    self_attn: AttentionParams
    cross: AttentionParams | None
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    norm1_g: Tensor
    norm1_b: Tensor
    norm2_g: Tensor | None
    norm2_b: Tensor | None
    norm3_g: Tensor
    norm3_b: Tensor

    def __post_init__(self):
        width = self.self_attn.width
        if width % self.heads:
            raise ValueError(f"width {width} is not divisible by {self.heads} heads")
        if self.ff1_w.shape[0] != width or self.ff2_w.shape != (self.ff1_w.shape[1], width):
            raise nx.ShapeError("feed-forward weights inconsistent with model width")

    @classmethod
    def init(cls, rng, width, heads, d_ff=None, cross=True, dtype=np.float64):
        d_ff = 4 * width if d_ff is None else d_ff
        return cls(
            heads=heads,
            self_attn=AttentionParams.init(rng, width, dtype),
            cross=AttentionParams.init(rng, width, dtype) if cross else None,
            ff1_w=_init_weight(rng, width, d_ff, dtype), ff1_b=_zeros(d_ff, dtype),
            ff2_w=_init_weight(rng, d_ff, width, dtype), ff2_b=_zeros(width, dtype),
            norm1_g=_ones(width, dtype), norm1_b=_zeros(width, dtype),
            norm2_g=_ones(width, dtype) if cross else None,
            norm2_b=_zeros(width, dtype) if cross else None,
            norm3_g=_ones(width, dtype), norm3_b=_zeros(width, dtype),
        )

    @property
    def width(self) -> int:
        return self.self_attn.width

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, AttentionParams):
                for g in fields(v):
                    out[f"{prefix}{f.name}.{g.name}"] = getattr(v, g.name)
            elif isinstance(v, Tensor):
                out[f"{prefix}{f.name}"] = v
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], prefix: str, heads: int) -> "DecoderUnitParams":
        def attn(name):
            keys = [f"{prefix}{name}.{g.name}" for g in fields(AttentionParams)]
            if keys[0] not in named:
                return None
            return AttentionParams(*(named[k] for k in keys))

        kwargs = {"heads": heads, "self_attn": attn("self_attn"), "cross": attn("cross")}
        for f in fields(cls):
            if f.name not in kwargs:
                kwargs[f.name] = named.get(f"{prefix}{f.name}")
        return cls(**kwargs)


# --------------------------------------------------------------- attention


def directional_mask(m_s: int) -> np.ndarray:
    """Lower-triangular allowed pattern: position t sees positions <= t."""
    if m_s < 1:
        raise ValueError("directional mask needs at least one position")
    return np.tril(np.ones((m_s, m_s), dtype=bool))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, w), b)


def head_scores(q: Tensor, k: Tensor, heads: int) -> list[Tensor]:
    """Unscaled per-head score matrices ``q_h @ k_h.T`` (queries x keys)."""
    d = q.cols // heads
    add_score_macs(q.rows * k.rows * q.cols)
    return [
        nx.matmul(nx.slice_cols(q, h * d, (h + 1) * d),
                  nx.transpose(nx.slice_cols(k, h * d, (h + 1) * d)))
        for h in range(heads)
    ]


def combine_heads(scores: list[Tensor], v: Tensor, params: AttentionParams,
                  mask: np.ndarray | None = None) -> Tensor:
    """Softmax each head's scores (scaled by 1/sqrt(d_head)), weight the
    values, concatenate heads and apply the output projection."""
    heads = len(scores)
    d = v.cols // heads
    outs = []
    for h, s in enumerate(scores):
        w = nx.softmax_rows(nx.scale(s, 1.0 / np.sqrt(d)), mask)
        outs.append(nx.matmul(w, nx.slice_cols(v, h * d, (h + 1) * d)))
    merged = outs[0] if heads == 1 else nx.concat_cols(outs)
    return linear(merged, params.wo, params.bo)


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor,
                         mask: np.ndarray | None, params: AttentionParams,
                         heads: int) -> Tensor:
    C = params.width
    if not (queries.cols == keys.cols == values.cols == C):
        raise nx.ShapeError(
            f"attention width mismatch: queries {queries.shape}, keys {keys.shape}, "
            f"values {values.shape}, model width {C}"
        )
    if keys.rows != values.rows:
        raise nx.ShapeError(f"keys {keys.shape} and values {values.shape} differ in rows")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (queries.rows, keys.rows):
            raise nx.ShapeError(f"mask {mask.shape} != ({queries.rows}, {keys.rows})")
        if not mask.any(axis=1).all():
            raise ValueError("a query row has no allowed key")
    q = linear(queries, params.wq, params.bq)
    # no key bias: it shifts every score in a query row equally, so softmax ignores it
    k = nx.matmul(keys, params.wk)
    v = linear(values, params.wv, params.bv)
    return combine_heads(head_scores(q, k, heads), v, params, mask)


def feed_forward(x: Tensor, p: DecoderUnitParams) -> Tensor:
    return linear(nx.relu(linear(x, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)


def self_attention_block(tokens: Tensor, mask, p: DecoderUnitParams) -> Tensor:
    attn = multi_head_attention(tokens, tokens, tokens, mask, p.self_attn, p.heads)
    return nx.layer_norm(nx.add(tokens, attn), p.norm1_g, p.norm1_b, LN_EPS)


def finish_unit(x: Tensor, cross_out: Tensor, p: DecoderUnitParams) -> Tensor:
    """Residual + norm after cross-attention, then the feed-forward block."""
    x = nx.layer_norm(nx.add(x, cross_out), p.norm2_g, p.norm2_b, LN_EPS)
    return nx.layer_norm(nx.add(x, feed_forward(x, p)), p.norm3_g, p.norm3_b, LN_EPS)


def transformer_decoder_unit(output_tokens: Tensor, input_tokens: Tensor,
                             self_mask: np.ndarray | None,
                             params: DecoderUnitParams) -> Tensor:
    if params.cross is None:
        raise ValueError("unit has no cross-attention weights")
    if output_tokens.cols != input_tokens.cols:
        raise nx.ShapeError(
            f"output tokens {output_tokens.shape} and input tokens {input_tokens.shape} differ in width"
        )
    x = self_attention_block(output_tokens, self_mask, params)
    cross = multi_head_attention(x, input_tokens, input_tokens, None, params.cross, params.heads)
    return finish_unit(x, cross, params)


def transformer_encoder_unit(tokens: Tensor, mask: np.ndarray | None,
                             params: DecoderUnitParams) -> Tensor:
    """Self-attention + feed-forward only (the baseline encoder block)."""
    x = self_attention_block(tokens, mask, params)
    return nx.layer_norm(nx.add(x, feed_forward(x, params)), params.norm3_g, params.norm3_b, LN_EPS)
