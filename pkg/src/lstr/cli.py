"""``lstr`` command line: train, infer, bench, eval, gradcheck (and synth)."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import io
from .bench import DEFAULT_CONFIG, DESIGNS, assembly_sweep, closed_form_table, format_report, run_bench
from .config import ConfigError, RunConfig, load_run_config
from .gradcheck import SIZES, TOLERANCE, run_checks
from .metrics import calibrated_ap, instance_spans, mean_ap, per_decile_cap
from .model import ModelParams
from .numerics import PRIMITIVES, corrupt_backward
from .streaming import StreamingEngine
from .training import LabeledSequence, TrainingDiverged, fit, newest_frame_accuracy

log = logging.getLogger("lstr")

EXIT_FAIL = 1
EXIT_USAGE = 2


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"lstr: error: {msg}", file=sys.stderr)
    return code


def _load_config(path) -> RunConfig:
    return load_run_config(path)


def _load_datasets(paths, width: int) -> list[LabeledSequence]:
    out = []
    for p in paths:
        feats = io.read_features(p)
        labels = io.read_labels(io.sidecar_path(p))
        if feats.shape[1] != width and len(feats):
            raise ValueError(f"{p}: feature width {feats.shape[1]} != model width {width}")
        out.append(LabeledSequence(feats.astype(np.float64), labels))
    return out


def _synthetic(run: RunConfig, seed: int):
    task = run.task()
    syn = run.synthetic
    data_seed = syn.get("data_seed", seed)
    train = task.sample(syn.get("sequences", 256), seed=data_seed + 1)
    test = task.sample(syn.get("test_sequences", 40), seed=data_seed + 2)
    return train, test


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    try:
        run = _load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))
    train_cfg = run.train if args.seed is None else replace(run.train, seed=args.seed)
    test = None
    try:
        if args.datasets:
            data = _load_datasets(args.datasets, run.model.width)
        elif run.synthetic is not None:
            data, test = _synthetic(run, train_cfg.seed)
        else:
            return _fail("no datasets given and the config has no synthetic section")
    except (OSError, ValueError) as exc:
        return _fail(str(exc))

    try:
        params, history = fit(data, train_cfg, run.model)
        status = 0
    except TrainingDiverged as exc:
        print(f"lstr: training diverged: {exc}; keeping last good parameters", file=sys.stderr)
        params, history, status = exc.params, exc.history, EXIT_FAIL

    ckpt = args.out or run.paths.get("checkpoint", "lstr.ckpt")
    io.save_checkpoint(ckpt, run.model, params)
    table = "epoch\tloss\taccuracy\tlr\n" + "".join(
        f"{h['epoch']}\t{h['loss']:.6f}\t{h['accuracy']:.4f}\t{h['lr']:.6g}\n" for h in history
    )
    hist_path = run.paths.get("history")
    if hist_path:
        with open(hist_path, "w") as fh:
            fh.write(table)
    sys.stdout.write(table)
    if test is not None:
        acc = newest_frame_accuracy(params, run.model, test)
        print(f"test_newest_frame_accuracy\t{acc:.4f}")
    print(f"checkpoint\t{ckpt}")
    return status


def cmd_infer(args) -> int:
    try:
        config, params = io.load_checkpoint(args.checkpoint)
        feats = io.read_features(args.features)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if len(feats) and feats.shape[1] != config.width:
        return _fail(f"feature width {feats.shape[1]} does not match checkpoint width {config.width}")
    if args.stride is not None:
        if args.stride < 1:
            return _fail("--stride must be >= 1")
        config = replace(config, stride=args.stride)
    dtype = np.float32 if args.precision == 32 else np.float64
    engine = StreamingEngine(params, config, dtype=dtype)
    step = engine.step if args.mode == "cached" else engine.step_reference
    out = np.zeros((len(feats), config.num_classes + 1), dtype=np.float32)
    for t, f in enumerate(feats):
        out[t] = step(f)[-1]
    io.write_predictions(args.out, out)
    print(f"{len(out)} steps written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    designs = [d.strip() for d in args.designs.split(",") if d.strip()]
    unknown = [d for d in designs if d not in DESIGNS]
    if unknown:
        return _fail(f"unknown design(s) {unknown}; valid names: {', '.join(DESIGNS)}")
    params = None
    task = train_cfg = None
    try:
        if args.checkpoint:
            base, params = io.load_checkpoint(args.checkpoint)
        elif args.config:
            run = _load_config(args.config)
            base, task, train_cfg = run.model, run.task(), run.train
        else:
            base = DEFAULT_CONFIG
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))
    seed = 0 if args.seed is None else args.seed
    rows = run_bench(base, designs, train=args.train, train_config=train_cfg, task=task,
                     seed=seed, params=params)
    report = format_report(rows)
    if args.sweep:
        sweep = assembly_sweep(base, seed=seed)
        report += "\nm_l\tcached_mults\tcached_adds\treference_mults\n" + "".join(
            f"{m}\t{v['cached_mults']}\t{v['cached_adds']}\t{v['reference_mults']}\n" for m, v in sweep.items()
        )
        report += "\nmode\tclosed_form_macs\n" + "".join(
            f"{k}\t{v}\n" for k, v in closed_form_table(base).items()
        )
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
    sys.stdout.write(report)
    return 0


def cmd_eval(args) -> int:
    try:
        labels = io.read_labels(args.labels)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    try:
        steps, scores = io.read_predictions(args.dump, steps=len(labels) or None)
    except io.FormatError as exc:
        return _fail(f"dump does not hold one record per label step ({len(labels)}): {exc}")
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if len(steps) != len(labels):
        return _fail(f"dump has {len(steps)} steps but the label sidecar has {len(labels)}")
    if not len(labels):
        return _fail("nothing to evaluate")
    try:
        if args.metric in ("map", "cap"):
            value, per_class, excluded = mean_ap(scores, labels, metric="ap" if args.metric == "map" else "cap")
            if excluded:
                print(f"# classes without positives (excluded): {excluded}", file=sys.stderr)
            print(f"{value:.4f}")
        else:
            rows = []
            for k in range(1, scores.shape[1]):
                pos = labels == k
                if pos.any():
                    rows.append(per_decile_cap(scores[:, k], pos, instance_spans(labels, k)))
            for d in range(10):
                vals = [r[d] for r in rows if r[d] is not None]
                print(f"decile_{d + 1}\t" + (f"{np.mean(vals):.4f}" if vals else "absent"))
    except ValueError as exc:
        return _fail(str(exc))
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.corrupt:
        if args.corrupt not in PRIMITIVES:
            return _fail(f"unknown primitive {args.corrupt!r}")
        with corrupt_backward(args.corrupt):
            results = run_checks(args.size, seed)
    else:
        results = run_checks(args.size, seed)
    print("check\tmax_rel_error\tskipped\tentries\tstatus")
    for r in results:
        print(f"{r.name}\t{r.error:.3e}\t{r.skipped}\t{r.entries}\t{'ok' if r.passed else 'FAIL'}")
    worst = max(results, key=lambda r: r.error)
    print(f"worst\t{worst.name}\t{worst.error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED (tolerance {TOLERANCE:g}): {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} checks below {TOLERANCE:g}")
    return 0


def cmd_synth(args) -> int:
    try:
        run = _load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))
    if run.synthetic is None:
        return _fail("config has no synthetic section")
    seed = run.train.seed if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    train, test = _synthetic(run, seed)
    for split, seqs in (("train", train), ("test", test)):
        for i, seq in enumerate(seqs):
            path = os.path.join(args.out, f"{split}_{i:04d}.feat")
            io.write_features(path, seq.features)
            io.write_labels(io.sidecar_path(path), seq.labels)
    print(f"wrote {len(train)} train and {len(test)} test sequences to {args.out}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lstr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def seed_flag(p):
        p.add_argument("--seed", type=int, default=None, help="u64 seed")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("datasets", nargs="*", help="feature files; labels read from <stem>.labels")
    p.add_argument("--out", help="checkpoint path (overrides paths.checkpoint)")
    seed_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="stream a feature file through a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("features")
    p.add_argument("--mode", choices=("cached", "reference"), default="cached")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--out", required=True)
    seed_flag(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="compare encoder/decoder designs")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    p.add_argument("--designs", default=",".join(DESIGNS))
    p.add_argument("--train", action="store_true", help="also train each design on the synthetic task")
    p.add_argument("--sweep", action="store_true", help="append the m_L sweep and closed-form counts")
    p.add_argument("--out")
    seed_flag(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="score a prediction dump against labels")
    p.add_argument("dump")
    p.add_argument("labels")
    p.add_argument("--metric", choices=("map", "cap", "decile"), default="map")
    seed_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--size", choices=tuple(SIZES), default="mini")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    seed_flag(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic task as feature/label files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    seed_flag(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
