"""Design comparison harness: parameter counts, per-step attention MACs and
(optionally) accuracy on the synthetic long-dependency task."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .model import ModelConfig, ModelParams, count_macs
from .streaming import StreamingEngine
from .training import TrainConfig, TriggerTask, fit, newest_frame_accuracy

DESIGNS = {
    "encoder-only": {"encoder": "self_attention", "decoder": False},
    "decoder-only": {"encoder": "none", "decoder": True},
    "one-stage": {"encoder": "one_stage", "decoder": True},
    "two-stage": {"encoder": "two_stage", "decoder": True},
    "no-decoder": {"encoder": "two_stage", "decoder": False},
    "cached-streaming": {"encoder": "two_stage", "decoder": True},
}

COLUMNS = ("design", "params", "score_macs_per_step", "assembly_mults_per_step", "accuracy")

DEFAULT_CONFIG = ModelConfig(width=64, m_s=16, m_l=512, num_classes=20, heads=8)


def design_config(base: ModelConfig, design: str) -> ModelConfig:
    if design not in DESIGNS:
        raise KeyError(design)
    return replace(base, **DESIGNS[design])


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("LSTR_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def steady_state_step(config: ModelConfig, params: ModelParams, cached: bool, seed: int = 0):
    """Fill both memories, then measure one step.

    Returns ``(score_macs, assembly_mults, assembly_adds)`` for that step.
    """
    rng = np.random.default_rng(seed)
    engine = StreamingEngine(params, config)
    engine.prefill(rng.standard_normal((config.m_s + config.m_l, config.width)))
    before = (engine.counters.score_macs, engine.counters.assembly_mults, engine.counters.assembly_adds)
    f = rng.standard_normal(config.width)
    engine.step(f) if cached else engine.step_reference(f)
    c = engine.counters
    return (c.score_macs - before[0], c.assembly_mults - before[1], c.assembly_adds - before[2])


def assembly_sweep(base: ModelConfig, m_ls=(128, 512, 2048), seed: int = 0) -> dict[int, dict]:
    """Stage-1 weight-assembly counts per step on both paths for several m_L."""
    out = {}
    for m_l in m_ls:
        cfg = replace(base, m_l=m_l)
        params = ModelParams.init(cfg, seed)
        _, mult_c, add_c = steady_state_step(cfg, params, cached=True, seed=seed)
        _, mult_r, _ = steady_state_step(cfg, params, cached=False, seed=seed)
        out[m_l] = {"cached_mults": mult_c, "cached_adds": add_c, "reference_mults": mult_r}
    return out


def _train_and_score(args):
    cfg, train_cfg, task, n_train, n_test, seed = args
    data = task.sample(n_train, seed=seed + 1)
    test = task.sample(n_test, seed=seed + 2)
    params, _ = fit(data, train_cfg, cfg)
    return newest_frame_accuracy(params, cfg, test)


def run_bench(base: ModelConfig, designs, train: bool = False, train_config: TrainConfig | None = None,
              task: TriggerTask | None = None, n_train: int = 256, n_test: int = 40,
              seed: int = 0, params: ModelParams | None = None) -> list[dict]:
    rows = []
    jobs = []
    for name in designs:
        cfg = design_config(base, name)
        p = params if (params is not None and name in ("two-stage", "cached-streaming")
                       and base.encoder == "two_stage" and base.decoder) else ModelParams.init(cfg, seed)
        cached = name == "cached-streaming"
        macs, mults, _ = steady_state_step(cfg, p, cached=cached, seed=seed)
        rows.append({"design": name, "params": p.num_parameters(), "score_macs_per_step": macs,
                     "assembly_mults_per_step": mults, "accuracy": None})
        if train:
            jobs.append((cfg, train_config or TrainConfig(lr=3e-3, windows_per_sequence=2, seed=seed),
                         task or TriggerTask(width=cfg.width, num_classes=cfg.num_classes, seed=seed),
                         n_train, n_test, seed))
    if train:
        workers = min(worker_count(), len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                accs = list(pool.map(_train_and_score, jobs))
        else:
            accs = [_train_and_score(j) for j in jobs]
        for row, acc in zip(rows, accs):
            row["accuracy"] = acc
    return rows


def format_report(rows) -> str:
    lines = ["\t".join(COLUMNS)]
    for r in rows:
        acc = "-" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        lines.append("\t".join([r["design"], str(r["params"]), str(r["score_macs_per_step"]),
                                str(r["assembly_mults_per_step"]), acc]))
    return "\n".join(lines) + "\n"


def closed_form_table(config: ModelConfig) -> dict[str, int]:
    return {mode: count_macs(config, mode) for mode in
            ("naive_encoder", "stacked_decoder", "two_stage", "streaming_amortized")}
