"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The training trends (criteria 6 and 7) run five 25-epoch trainings of the
desk recipe in ``configs/trigger.json``; they take roughly 14 minutes on one
core and are spread over ``LSTR_THREADS`` worker processes when set.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from lstr.attention import directional_mask
from lstr.bench import assembly_sweep, worker_count
from lstr.config import load_run_config
from lstr.gradcheck import TOLERANCE, run_checks
from lstr.metrics import calibrated_ap, per_frame_ap
from lstr.model import ModelConfig, ModelParams, count_macs, predict_window
from lstr.streaming import stream
from lstr.training import LabeledSequence, TrainConfig, fit, newest_frame_accuracy, sequence_loss

RECIPE = Path(__file__).resolve().parent.parent / "configs" / "trigger.json"


def rel_dev(a, b):
    return float(np.abs(a - b).max() / np.abs(b).max())


def test_criterion_1_streaming_equivalence(criterion):
    cfg = ModelConfig(width=64, m_s=16, m_l=256, num_classes=20, heads=8)
    params = ModelParams.init(cfg, seed=0)
    frames = np.random.default_rng(0).standard_normal((1000, cfg.width))
    t0 = time.perf_counter()
    dev = {}
    for bits, dtype in ((64, np.float64), (32, np.float32)):
        cached = stream(params, cfg, frames, "cached", dtype=dtype)
        ref = stream(params, cfg, frames, "reference", dtype=dtype)
        dev[bits] = rel_dev(cached, ref)
    elapsed = time.perf_counter() - t0
    ok = dev[64] < 1e-10 and dev[32] < 1e-5 and elapsed < 120
    criterion(1, "streaming equivalence", ok,
              f"1000 frames, 64-bit rel {dev[64]:.2e} (<1e-10), 32-bit rel {dev[32]:.2e} (<1e-5), "
              f"{elapsed:.0f}s (<120s)")
    assert ok


def test_criterion_2_amortized_assembly(criterion):
    base = ModelConfig(width=64, m_s=16, m_l=128, num_classes=20, heads=8)
    sweep = assembly_sweep(base, m_ls=(128, 512, 2048))
    n0c = base.n0 * base.width
    ok = all(v["cached_mults"] == n0c and v["reference_mults"] == base.n0 * m * base.width
             for m, v in sweep.items())
    detail = ", ".join(f"m_L={m}: cached {v['cached_mults']} / reference {v['reference_mults']}"
                       for m, v in sweep.items())
    criterion(2, "amortized weight assembly", ok, f"n0*C={n0c}; {detail}")
    assert ok


def test_criterion_3_complexity_ordering(criterion):
    cfg = ModelConfig(width=1024, m_s=64, m_l=2048, num_classes=20, n0=16, n1=32, l_enc=2, heads=16)
    naive, stacked, two = (count_macs(cfg, m) for m in ("naive_encoder", "stacked_decoder", "two_stage"))
    ok = naive > stacked > two and two == 36_962_304
    criterion(3, "complexity ordering", ok, f"naive {naive:,} > stacked {stacked:,} > two-stage {two:,}")
    assert ok


def test_criterion_4_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = run_checks("mini", seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    ok = all(r.passed for r in results) and elapsed < 60
    criterion(4, "gradient suite", ok,
              f"{len(results)} checks, worst {worst.name} {worst.error:.2e} (<{TOLERANCE:g}), {elapsed:.0f}s (<60s)")
    assert ok


def test_criterion_5_causality(criterion):
    cfg = ModelConfig(width=16, m_s=8, m_l=16, num_classes=3, n0=4, n1=4, l_enc=1, l_dec=2, heads=4)
    rng = np.random.default_rng(5)
    violations = 0
    for trial in range(100):
        params = ModelParams.init(cfg, seed=trial)
        lv = rng.standard_normal((int(rng.integers(0, cfg.m_l + 1)), cfg.width))
        sv = rng.standard_normal((cfg.m_s, cfg.width))
        t = int(rng.integers(0, cfg.m_s - 1))
        sv2 = sv.copy()
        sv2[t + 1:] = rng.standard_normal((cfg.m_s - t - 1, cfg.width)) * 10
        a = predict_window(lv, sv, params, cfg)
        b = predict_window(lv, sv2, params, cfg)
        violations += not np.array_equal(a[: t + 1], b[: t + 1])
    assert directional_mask(cfg.m_s).sum() == cfg.m_s * (cfg.m_s + 1) // 2
    ok = violations == 0
    criterion(5, "causality", ok, f"100 trials, {violations} with any change at positions <= t")
    assert ok


# ------------------------------------------------------------------ training trends


def _train(job):
    name, m_l, trigger_len, stride = job
    run = load_run_config(RECIPE)
    task = replace(run.task(), trigger_len=trigger_len)
    cfg = replace(run.model, m_l=m_l, stride=stride)
    seed = run.synthetic["data_seed"]
    train = task.sample(run.synthetic["sequences"], seed=seed + 1)
    test = task.sample(run.synthetic["test_sequences"], seed=seed + 2)
    t0 = time.perf_counter()
    params, _ = fit(train, run.train, cfg)
    return name, newest_frame_accuracy(params, cfg, test), time.perf_counter() - t0


JOBS = [
    ("long", 256, 1, 1),
    ("none", 0, 1, 1),
    ("stride1", 256, 2, 1),
    ("stride2", 256, 2, 2),
    ("stride32", 256, 2, 32),
]


@pytest.fixture(scope="module")
def trends():
    workers = worker_count(os.cpu_count() or 1)
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(min(workers, len(JOBS))) as pool:
            out = list(pool.map(_train, JOBS))
    else:
        out = [_train(j) for j in JOBS]
    wall = time.perf_counter() - t0
    return {name: (acc, secs) for name, acc, secs in out}, wall


def test_criterion_6_long_memory_trend(criterion, trends):
    res, _ = trends
    chance = 1 / load_run_config(RECIPE).model.num_classes
    long_acc, long_s = res["long"]
    none_acc, none_s = res["none"]
    ok = long_acc >= 0.95 and none_acc <= chance + 0.10 and long_s + none_s < 30 * 60
    criterion(6, "long-memory trend", ok,
              f"m_L=256 acc {long_acc:.3f} (>=0.95), m_L=0 acc {none_acc:.3f} (<={chance + 0.10:.2f}), "
              f"{long_s + none_s:.0f}s of training (<1800s)")
    assert ok


def test_criterion_7_downsampling_trend(criterion, trends):
    res, _ = trends
    s1, s2, s32 = (res[k][0] for k in ("stride1", "stride2", "stride32"))
    ok = abs(s1 - s2) <= 0.02 and s1 - s32 >= 0.10
    criterion(7, "downsampling trend", ok,
              f"stride 1 {s1:.3f}, stride 2 {s2:.3f} (|diff|<=0.02), stride 32 {s32:.3f} (drop >=0.10)")
    assert ok


def test_criterion_8_loss_sanity(criterion):
    worst = 0.0
    for m_s, k in ((16, 20), (8, 2), (1, 1)):
        loss = sequence_loss(np.full((m_s, k + 1), 1 / (k + 1)), np.arange(m_s) % (k + 1)).value[0, 0]
        worst = max(worst, abs(loss - m_s * math.log(k + 1)))
    cfg = ModelConfig(width=16, m_s=8, m_l=16, num_classes=3, n0=4, n1=4, l_enc=1, l_dec=1, heads=2)
    rng = np.random.default_rng(0)
    seq = LabeledSequence(rng.standard_normal((32, cfg.width)), np.repeat(rng.integers(0, 4, 8), 4))
    _, hist = fit([seq], TrainConfig(lr=1e-2, epochs=250, batch_size=8, windows_per_sequence=8,
                                     weight_decay=0.0, warmup_fraction=0.1), cfg)
    final = hist[-1]["loss"]
    ok = worst < 1e-9 and final < 0.05
    criterion(8, "loss sanity", ok, f"uniform-loss error {worst:.1e} (<1e-9), overfit loss {final:.4f} (<0.05)")
    assert ok


def test_criterion_9_metric_fixtures(criterion):
    ap = per_frame_ap([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    cap = calibrated_ap([0.9, 0.8, 0.7], [1, 0, 1], w=0.5)
    rng = np.random.default_rng(9)
    gap = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 60))
        pos = rng.random(n) < 0.3
        pos[0] = True
        s = rng.random(n)
        gap = max(gap, abs(calibrated_ap(s, pos, w=1.0) - per_frame_ap(s, pos)))
    ok = ap == 5 / 6 and cap == 0.75 and gap < 1e-12
    criterion(9, "metric fixtures", ok, f"AP {ap!r} (=5/6), cAP(w=0.5) {cap!r} (=0.75), w=1 gap {gap:.1e} (<1e-12)")
    assert ok
