"""Finite-difference checks over every primitive, each layer and the loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .attention import (
    DecoderUnitParams,
    directional_mask,
    multi_head_attention,
    transformer_decoder_unit,
    transformer_encoder_unit,
)
from .memory import sinusoid
from .model import ModelConfig, ModelParams, forward_window
from .training import sequence_loss

TOLERANCE = 1e-4

SIZES = {
    "mini": ModelConfig(width=8, m_s=4, m_l=8, num_classes=2, n0=2, n1=2, l_enc=1, l_dec=1,
                        heads=2, d_ff=16),
    "small": ModelConfig(width=16, m_s=8, m_l=16, num_classes=3, n0=4, n1=4, l_enc=2, l_dec=2,
                         heads=2, d_ff=32),
}


@dataclass
class CheckResult:
    name: str
    error: float
    skipped: int
    entries: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def primitive_cases(rng) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One small graph per registered primitive."""
    r = rng.standard_normal
    mask = directional_mask(4)
    labels = np.array([0, 2, 1])
    return {
        "add": (lambda a, b: nx.add(a, b), [r((3, 4)), r((1, 4))]),
        "sub": (lambda a, b: nx.sub(a, b), [r((3, 4)), r((3, 1))]),
        "mul": (lambda a, b: nx.mul(a, b), [r((3, 4)), r((3, 4))]),
        "scale": (lambda a: nx.scale(a, -1.7), [r((2, 3))]),
        "matmul": (lambda a, b: nx.matmul(a, b), [r((4, 4)), r((4, 4))]),
        "transpose": (lambda a: nx.transpose(a), [r((2, 5))]),
        "relu": (lambda a: nx.relu(a), [_away_from_zero(rng, (3, 4))]),
        "softmax_rows": (lambda a: nx.softmax_rows(a, mask), [r((4, 4))]),
        "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b, 1e-5), [r((3, 5)), r((1, 5)), r((1, 5))]),
        "slice_cols": (lambda a: nx.slice_cols(a, 1, 3), [r((3, 4))]),
        "concat_cols": (lambda a, b: nx.concat_cols([a, b]), [r((3, 2)), r((3, 3))]),
        "concat_rows": (lambda a, b: nx.concat_rows([a, b]), [r((2, 3)), r((1, 3))]),
        "take_rows": (lambda a: nx.take_rows(a, [2, 0, 2]), [r((3, 4))]),
        "mean_rows": (lambda a: nx.mean_rows(a), [r((4, 3))]),
        "pick": (lambda a: nx.pick(a, labels), [r((3, 3))]),
        "log": (lambda a: nx.log(a, 1e-12), [np.abs(r((3, 3))) + 0.5]),
        "sum_all": (lambda a: nx.sum_all(a), [r((3, 4))]),
    }


def _unit_case(rng, config: ModelConfig, cross=True):
    unit = DecoderUnitParams.init(rng, config.width, config.heads, config.ff_width, cross=cross)
    named = unit.named_tensors()
    names = list(named)
    return unit, names, [named[k].value for k in names]


def layer_cases(rng, config: ModelConfig) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    C, H = config.width, config.heads
    unit, names, values = _unit_case(rng, config)
    enc_unit, enc_names, enc_values = _unit_case(rng, config, cross=False)
    tokens = rng.standard_normal((3, C))
    inputs = rng.standard_normal((5, C))
    mask = directional_mask(3)

    def rebuild(names_, arrs, heads=H):
        return DecoderUnitParams.from_named(dict(zip(names_, arrs)), "", heads)

    def attention(q, kv, *arrs):
        u = rebuild(names, arrs)
        return multi_head_attention(q, kv, kv, None, u.cross, H)

    def decoder_unit(out, inp, *arrs):
        return transformer_decoder_unit(out, inp, mask, rebuild(names, arrs))

    def encoder_unit(tok, *arrs):
        return transformer_encoder_unit(tok, mask, rebuild(enc_names, arrs))

    def linear_layer(x, w, b):
        return nx.add(nx.matmul(x, w), b)

    return {
        "linear": (linear_layer, [rng.standard_normal((4, 4)), rng.standard_normal((4, 4)),
                                  rng.standard_normal((1, 4))]),
        "multi_head_attention": (attention, [tokens, inputs, *values]),
        "transformer_decoder_unit": (decoder_unit, [tokens, inputs, *values]),
        "transformer_encoder_unit": (encoder_unit, [tokens, *enc_values]),
    }


def loss_case(rng, config: ModelConfig):
    """End-to-end masked sequence loss as a function of every parameter."""
    params = ModelParams.init(config, seed=int(rng.integers(1 << 31)))
    named = params.named_tensors()
    names = list(named)
    feats = rng.standard_normal((config.m_s + config.m_l, config.width))
    views = feats + sinusoid(config.m_s + config.m_l, config.width)[::-1]
    long_view, short_view = views[: config.m_l], views[config.m_l:]
    labels = rng.integers(0, config.num_classes + 1, size=config.m_s)

    def fn(*arrs):
        p = ModelParams.from_named(config, dict(zip(names, arrs)))
        return sequence_loss(forward_window(long_view, short_view, p, config, causal=True), labels)

    return fn, [named[k].value for k in names]


def run_checks(size: str = "mini", seed: int = 0, only=None) -> list[CheckResult]:
    config = SIZES[size]
    rng = np.random.default_rng(seed)
    cases = {}
    cases.update(primitive_cases(rng))
    cases.update(layer_cases(rng, config))
    cases["sequence_loss"] = loss_case(rng, config)
    results = []
    for name, (fn, inputs) in cases.items():
        if only is not None and name not in only:
            continue
        rep = nx.gradient_check(fn, inputs, seed=seed)
        results.append(CheckResult(name, rep.max_error, len(rep.skipped), rep.entries))
    return results
