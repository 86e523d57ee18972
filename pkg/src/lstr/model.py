"""LSTR encoder/decoder, classifier head and closed-form MAC counts.

The long-term memory is compressed in two stages: one decoder unit maps
the ``m_L`` memory rows onto ``n0`` learned tokens, then ``l_enc`` stacked
units refine ``n1`` learned tokens against that result.  The short-term
rows then query the ``n1`` latents through ``l_dec`` decoder units under a
directional mask, and a linear head gives per-position class probabilities.

Other encoder/decoder arrangements (the ablation baselines) are selected
through :class:`ModelConfig` switches so they share every line of code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .attention import (
    DecoderUnitParams,
    directional_mask,
    linear,
    transformer_decoder_unit,
    transformer_encoder_unit,
)
from .memory import downsample_index
from .numerics import Tensor

ENCODERS = ("two_stage", "one_stage", "none", "self_attention")
MAC_MODES = ("naive_encoder", "stacked_decoder", "two_stage", "streaming_amortized")


@dataclass(frozen=True)
class ModelConfig:
    """Shape and layout of an LSTR model.

    Memory lengths count model steps (one feature vector per step).  Class 0
    is background, so the head is ``num_classes + 1`` wide.
    """

    width: int
    m_s: int
    m_l: int
    num_classes: int
    n0: int = 16
    n1: int = 32
    l_enc: int = 2
    l_dec: int = 2
    heads: int = 8
    d_ff: int | None = None
    stride: int = 1
    encoder: str = "two_stage"
    decoder: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("width", "m_s", "n0", "n1", "heads", "num_classes", "stride"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        for name in ("m_l", "l_enc", "l_dec"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.heads >= 1 and self.width % self.heads:
            out.append(f"width {self.width} is not divisible by heads {self.heads}")
        if self.encoder not in ENCODERS:
            out.append(f"encoder must be one of {ENCODERS}")
        if self.d_ff is not None and self.d_ff < 1:
            out.append("d_ff must be >= 1")
        if self.encoder == "self_attention" and self.decoder:
            out.append("the self_attention encoder already consumes the short-term memory; set decoder=false")
        return out

    @property
    def ff_width(self) -> int:
        return 4 * self.width if self.d_ff is None else self.d_ff

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ModelParams:
    stage1_tokens: Tensor
    stage2_tokens: Tensor
    stage1_unit: DecoderUnitParams | None
    stage2_units: tuple[DecoderUnitParams, ...]
    decoder_units: tuple[DecoderUnitParams, ...]
    cls_w: Tensor
    cls_b: Tensor
    encoder_units: tuple[DecoderUnitParams, ...] = ()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "ModelParams":
        rng = np.random.default_rng(seed)
        C, H, dff = config.width, config.heads, config.ff_width

        def unit(cross=True):
            return DecoderUnitParams.init(rng, C, H, dff, cross=cross, dtype=dtype)

        enc = config.encoder
        stage1 = unit() if enc == "two_stage" else None
        n_stage2 = {"two_stage": config.l_enc, "one_stage": 1 + config.l_enc}.get(enc, 0)
        stage2 = tuple(unit() for _ in range(n_stage2))
        enc_units = ()
        if enc == "self_attention":
            enc_units = tuple(unit(cross=False) for _ in range(1 + config.l_enc + config.l_dec))
        dec = tuple(unit() for _ in range(config.l_dec)) if config.decoder else ()
        K1 = config.num_classes + 1
        return cls(
            stage1_tokens=Tensor(rng.standard_normal((config.n0, C)).astype(dtype)),
            stage2_tokens=Tensor(rng.standard_normal((config.n1, C)).astype(dtype)),
            stage1_unit=stage1,
            stage2_units=stage2,
            decoder_units=dec,
            encoder_units=enc_units,
            cls_w=Tensor((rng.standard_normal((C, K1)) / np.sqrt(C)).astype(dtype)),
            cls_b=Tensor(np.zeros((1, K1), dtype=dtype)),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"stage1_tokens": self.stage1_tokens, "stage2_tokens": self.stage2_tokens}
        if self.stage1_unit is not None:
            out.update(self.stage1_unit.named_tensors("stage1."))
        for group in ("stage2_units", "decoder_units", "encoder_units"):
            for i, u in enumerate(getattr(self, group)):
                out.update(u.named_tensors(f"{group.split('_')[0]}{i}."))
        out["cls_w"] = self.cls_w
        out["cls_b"] = self.cls_b
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, named: dict) -> "ModelParams":
        named = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in named.items()}
        H = config.heads

        def group(prefix):
            units, i = [], 0
            while f"{prefix}{i}.self_attn.wq" in named:
                units.append(DecoderUnitParams.from_named(named, f"{prefix}{i}.", H))
                i += 1
            return tuple(units)

        stage1 = None
        if "stage1.self_attn.wq" in named:
            stage1 = DecoderUnitParams.from_named(named, "stage1.", H)
        return cls(
            stage1_tokens=named["stage1_tokens"],
            stage2_tokens=named["stage2_tokens"],
            stage1_unit=stage1,
            stage2_units=group("stage2"),
            decoder_units=group("decoder"),
            encoder_units=group("encoder"),
            cls_w=named["cls_w"],
            cls_b=named["cls_b"],
        )

    def replace_values(self, config: ModelConfig, values: dict[str, np.ndarray]) -> "ModelParams":
        named = {k: values.get(k, t.value) for k, t in self.named_tensors().items()}
        return ModelParams.from_named(config, named)

    def astype(self, config: ModelConfig, dtype) -> "ModelParams":
        return ModelParams.from_named(
            config, {k: t.value.astype(dtype) for k, t in self.named_tensors().items()}
        )

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self.named_tensors().values())

    @property
    def dtype(self):
        return self.cls_w.dtype


# ------------------------------------------------------------------ forward


def _as_tensor(view, dtype) -> Tensor:
    return view if isinstance(view, Tensor) else Tensor(np.asarray(view, dtype=dtype))


def encode_long_memory(long_view, params: ModelParams, config: ModelConfig | None = None) -> Tensor:
    """Two-stage compression of the long-term view to an ``n1 x C`` latent.

    With an empty view stage 1 is skipped and stage 2 attends to the stage-1
    tokens themselves, which act as a learned null memory.
    """
    C = params.stage1_tokens.cols
    lv = _as_tensor(np.zeros((0, C)) if long_view is None else long_view, params.dtype)
    if lv.cols != C:
        raise nx.ShapeError(f"long view has {lv.cols} columns, model width is {C}")
    if lv.rows > 0:
        memory = transformer_decoder_unit(params.stage1_tokens, lv, None, params.stage1_unit)
    else:
        memory = params.stage1_tokens
    return stage_two(memory, params)


def stage_two(stage1_out: Tensor, params: ModelParams) -> Tensor:
    x = params.stage2_tokens
    for unit in params.stage2_units:
        x = transformer_decoder_unit(x, stage1_out, None, unit)
    return x


def _encode(long_view: Tensor, params: ModelParams, config: ModelConfig) -> Tensor | None:
    enc = config.encoder
    if enc == "two_stage":
        return encode_long_memory(long_view, params, config)
    memory = long_view if long_view.rows > 0 else params.stage1_tokens
    if enc == "one_stage":
        x = params.stage2_tokens
        for unit in params.stage2_units:
            x = transformer_decoder_unit(x, memory, None, unit)
        return x
    if enc == "none":
        return memory
    return None


def decode_short_term(encoded: Tensor, short_view, params: ModelParams, causal: bool = True) -> Tensor:
    sv = _as_tensor(short_view, params.dtype)
    if sv.cols != encoded.cols:
        raise nx.ShapeError(f"short view has {sv.cols} columns, encoded memory {encoded.cols}")
    mask = directional_mask(sv.rows) if causal else None
    x = sv
    for unit in params.decoder_units:
        x = transformer_decoder_unit(x, encoded, mask, unit)
    return x


def classify(token_states: Tensor, params: ModelParams) -> Tensor:
    """Affine head followed by a row softmax: one (K+1)-way vector per row."""
    return nx.softmax_rows(linear(token_states, params.cls_w, params.cls_b))


def _self_attention_states(long_view: Tensor, short_view: Tensor, params: ModelParams,
                           causal: bool) -> Tensor:
    nl, ns = long_view.rows, short_view.rows
    tokens = nx.concat_rows([long_view, short_view]) if nl else short_view
    n = nl + ns
    mask = np.zeros((n, n), dtype=bool)
    mask[:nl, :nl] = True
    mask[nl:, :nl] = True
    mask[nl:, nl:] = directional_mask(ns) if causal else True
    for unit in params.encoder_units:
        tokens = transformer_encoder_unit(tokens, mask, unit)
    return nx.take_rows(tokens, np.arange(nl, n)) if nl else tokens


def token_states(long_view, short_view, params: ModelParams, config: ModelConfig,
                 causal: bool = True) -> Tensor:
    """Final short-term token states for any configured design."""
    dtype = params.dtype
    lv = _as_tensor(long_view, dtype)
    sv = _as_tensor(short_view, dtype)
    if lv.rows and config.stride > 1:
        lv = nx.take_rows(lv, downsample_index(lv.rows, config.stride))
    if config.encoder == "self_attention":
        return _self_attention_states(lv, sv, params, causal)
    encoded = _encode(lv, params, config)
    if config.decoder:
        return decode_short_term(encoded, sv, params, causal)
    return nx.add(sv, nx.mean_rows(encoded))


def forward_window(long_view, short_view, params: ModelParams, config: ModelConfig,
                   causal: bool = True) -> Tensor:
    """Per-position probabilities (oldest first) for one memory snapshot."""
    return classify(token_states(long_view, short_view, params, config, causal), params)


def predict_window(long_view, short_view, params: ModelParams, config: ModelConfig,
                   causal: bool = True) -> np.ndarray:
    return forward_window(long_view, short_view, params, config, causal).value


# --------------------------------------------------------------- MAC counts


def count_macs(config: ModelConfig, mode: str) -> int:
    """Closed-form attention-score multiply counts for the long-memory encoder.

    Only query-key score products are counted; projections, feed-forward and
    weighted sums are excluded identically for every mode.
    """
    n0, n1, C, m, l = config.n0, config.n1, config.width, config.m_l, config.l_enc
    if mode == "naive_encoder":
        return m * m * (1 + l) * C
    if mode == "stacked_decoder":
        return (n1 * n1 + n1 * m) * (1 + l) * C
    stage2 = (n1 * n1 + n1 * n0) * l * C
    if mode == "two_stage":
        return (n0 * n0 * C + n0 * m * C if m else 0) + stage2
    if mode == "streaming_amortized":
        return (n0 * n0 * C + n0 * (m + C) if m else 0) + stage2
    raise ValueError(f"unknown mode {mode!r}; expected one of {MAC_MODES}")
