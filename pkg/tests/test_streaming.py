import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from lstr.attention import linear, self_attention_block
from lstr.memory import PositionalTable
from lstr.model import ModelParams, count_macs, predict_window
from lstr.streaming import StreamingEngine, init_cache, stream
from lstr.training import LabeledSequence, window_at

from conftest import SMALL


def rel_dev(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_positional_scores_against_scalar_oracle(small):
    cfg, params = small
    table = PositionalTable(cfg.m_s + cfg.m_l, cfg.width)
    cache = init_cache(params, table, cfg)
    cross = params.stage1_unit.cross
    lam = self_attention_block(params.stage1_tokens, None, params.stage1_unit)
    q = linear(lam, cross.wq, cross.bq).value
    wk = cross.wk.value
    C, H = cfg.width, cfg.heads
    d = C // H
    for h in range(H):
        for r in (0, 7, cfg.m_l - 1):
            s = table[cfg.m_s + r]
            for i in range(cfg.n0):
                want = sum(sum(s[a] * wk[a, c] for a in range(C)) * q[i, c] for c in range(h * d, (h + 1) * d))
                assert cache.As[h, r, i] == pytest.approx(want, rel=1e-12, abs=1e-13)


def test_zero_positional_table_gives_zero_as(small):
    cfg, params = small
    cache = init_cache(params, PositionalTable.zeros(cfg.m_s + cfg.m_l, cfg.width), cfg)
    assert not cache.As.any()


@pytest.mark.parametrize("stride", [1, 3])
def test_cached_equals_reference(small, rng, stride):
    cfg, params = small
    cfg = replace(cfg, stride=stride)
    frames = rng.standard_normal((cfg.m_s + cfg.m_l + 20, cfg.width))
    a = stream(params, cfg, frames, "cached")
    b = stream(params, cfg, frames, "reference")
    assert rel_dev(a, b) < 1e-12


def test_stream_matches_window_forward(small, rng):
    cfg, params = small
    seq = LabeledSequence(rng.standard_normal((cfg.m_s + cfg.m_l + 5, cfg.width)),
                          np.zeros(cfg.m_s + cfg.m_l + 5, dtype=int))
    engine = StreamingEngine(params, cfg)
    for t, f in enumerate(seq.features):
        probs = engine.step(f)
        if t + 1 >= cfg.m_s:
            lv, sv, _ = window_at(seq, t + 1, cfg)
            np.testing.assert_allclose(probs, predict_window(lv, sv, params, cfg), rtol=1e-10, atol=1e-14)


def test_cold_start_shapes(small, rng):
    cfg, params = small
    engine = StreamingEngine(params, cfg)
    for t in range(cfg.m_s + 2):
        probs = engine.step(rng.standard_normal(cfg.width))
        assert probs.shape == (min(t + 1, cfg.m_s), cfg.num_classes + 1)
        assert np.isfinite(probs).all()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 80))
def test_feature_cache_stays_coherent(seed, steps):
    cfg = replace(SMALL, m_l=12)
    params = ModelParams.init(cfg, seed=1)
    r = np.random.default_rng(seed)
    engine = StreamingEngine(params, cfg)
    for f in r.standard_normal((steps, cfg.width)):
        engine.step(f)
        np.testing.assert_allclose(engine.cache.af_queue.ordered(), engine.rebuilt_af_queue(), rtol=1e-12,
                                   atol=1e-13)


@pytest.mark.parametrize("m_l", [8, 32])
def test_assembly_counters_single_head(rng, m_l):
    cfg = replace(SMALL, m_l=m_l, heads=1)
    params = ModelParams.init(cfg, seed=0)
    engine = StreamingEngine(params, cfg)
    engine.prefill(rng.standard_normal((cfg.m_s + m_l, cfg.width)))
    before = (engine.counters.assembly_mults, engine.counters.assembly_adds)
    engine.step(rng.standard_normal(cfg.width))
    assert engine.counters.assembly_mults - before[0] == cfg.n0 * cfg.width
    assert engine.counters.assembly_adds - before[1] == cfg.n0 * m_l
    before = engine.counters.assembly_mults
    engine.step_reference(rng.standard_normal(cfg.width))
    assert engine.counters.assembly_mults - before == cfg.n0 * m_l * cfg.width


def test_cached_step_score_macs(small, rng):
    cfg, params = small
    engine = StreamingEngine(params, cfg)
    engine.prefill(rng.standard_normal((cfg.m_s + cfg.m_l, cfg.width)))
    before = engine.counters.score_macs
    engine.step(rng.standard_normal(cfg.width))
    per_step = engine.counters.score_macs - before
    stage2 = count_macs(replace(cfg, m_l=0), "two_stage")
    decoder = (cfg.m_s ** 2 + cfg.m_s * cfg.n1) * cfg.l_dec * cfg.width
    assert per_step == cfg.n0 * cfg.width + stage2 + decoder


def test_reset_and_bad_frame(small, rng):
    cfg, params = small
    engine = StreamingEngine(params, cfg)
    frames = rng.standard_normal((30, cfg.width))
    first = [engine.step(f)[-1] for f in frames]
    engine.reset()
    second = [engine.step(f)[-1] for f in frames]
    np.testing.assert_array_equal(first, second)
    with pytest.raises(ValueError):
        engine.step(np.zeros(cfg.width + 1))
    with pytest.raises(ValueError):
        stream(params, cfg, frames, mode="fast")


def test_float32_path(small, rng):
    cfg, params = small
    frames = rng.standard_normal((60, cfg.width))
    a = stream(params, cfg, frames, "cached", dtype=np.float32)
    b = stream(params, cfg, frames, "reference", dtype=np.float32)
    assert a.dtype == np.float32
    assert rel_dev(a, b) < 1e-5
    assert rel_dev(a, stream(params, cfg, frames)) < 1e-4


def test_other_designs_stream_through_reference(rng):
    cfg = replace(SMALL, encoder="one_stage")
    params = ModelParams.init(cfg, seed=0)
    frames = rng.standard_normal((40, cfg.width))
    np.testing.assert_array_equal(stream(params, cfg, frames, "cached"), stream(params, cfg, frames, "reference"))
