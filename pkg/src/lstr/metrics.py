"""Per-frame average precision, calibrated AP and the per-decile protocol.

Frames are ranked by descending score.  Ties keep their original frame
order by default (``ties="stable"``); ``ties="block"`` instead credits every
positive inside a tied run with the precision reached at the end of the run.
"""

from __future__ import annotations

import warnings

import numpy as np


# accumulate in extended precision and round once, so hand fixtures such as
# (1 + 2/3) / 2 come out as the nearest double
_ACC = np.longdouble


class MetricWarning(UserWarning):
    pass


def _ranked(scores, positives, ties: str):
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and positives {positives.shape} must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not positives.any():
        raise ValueError("need at least one positive frame")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    if ties == "block":
        s = scores[order]
        # index of the last element of each tied run
        last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
        run_end = np.repeat(last, np.diff(np.r_[-1, last]))
        tp, fp = tp[run_end], fp[run_end]
    elif ties != "stable":
        raise ValueError("ties must be 'stable' or 'block'")
    return hits, tp, fp


def per_frame_ap(scores, positives, ties: str = "stable") -> float:
    """``sum_k Prec(k) * I(k) / P`` over the descending-score ranking."""
    hits, tp, fp = _ranked(scores, positives, ties)
    prec = tp.astype(_ACC) / (tp + fp)
    return float(prec[hits].sum() / hits.sum())


def calibrated_ap(scores, positives, w: float | None = None, ties: str = "stable") -> float:
    """AP with ``cPrec = TP / (TP + FP / w)``; ``w`` defaults to #neg / #pos.

    With no negatives ``w`` is undefined: plain AP is returned and a
    :class:`MetricWarning` is emitted.
    """
    hits, tp, fp = _ranked(scores, positives, ties)
    n_pos = int(hits.sum())
    n_neg = len(hits) - n_pos
    if w is None:
        if n_neg == 0:
            warnings.warn("no negative frames; calibrated AP falls back to AP", MetricWarning)
            return per_frame_ap(scores, positives, ties)
        w = n_neg / n_pos
    if w <= 0:
        raise ValueError("w must be positive")
    cprec = tp.astype(_ACC) / (tp + fp / _ACC(w))
    return float(cprec[hits].sum() / n_pos)


def mean_ap(scores, labels, classes=None, metric: str = "ap", ties: str = "stable"):
    """Mean over classes of (calibrated) AP from an (N, K+1) score matrix.

    ``classes`` defaults to the foreground classes ``1..K``.  Classes with no
    positive frame are left out of the mean and listed in the second return
    value.  Returns ``(mean, per_class, excluded)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError("scores must be (N, K+1) with one label per row")
    if classes is None:
        classes = range(1, scores.shape[1])
    fn = {"ap": per_frame_ap, "cap": calibrated_ap}[metric]
    per_class, excluded = {}, []
    for k in classes:
        pos = labels == k
        if not pos.any():
            excluded.append(k)
            continue
        per_class[k] = fn(scores[:, k], pos, ties=ties)
    if not per_class:
        raise ValueError("no class has a positive frame")
    return float(np.mean(list(per_class.values()))), per_class, excluded


def decile_of(instance_spans, n: int) -> np.ndarray:
    """Decile index (0..9) of each frame inside its instance, -1 outside any."""
    out = np.full(n, -1, dtype=np.int64)
    for start, end in instance_spans:
        length = end - start
        if length <= 0:
            continue
        rel = np.arange(length)
        out[start:end] = np.minimum(rel * 10 // length, 9)
    return out


def per_decile_cap(scores, positives, instance_spans, ties: str = "stable") -> list[float | None]:
    """Calibrated AP restricted to positives in each tenth of their instance.

    Negative frames are shared by every decile.  An empty decile yields None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    decile = decile_of(instance_spans, len(scores))
    out = []
    for d in range(10):
        keep = ~positives | (decile == d)
        if not (positives & keep).any():
            out.append(None)
            continue
        out.append(calibrated_ap(scores[keep], positives[keep], ties=ties))
    return out


def instance_spans(labels, k: int) -> list[tuple[int, int]]:
    """Maximal runs ``[start, end)`` where ``labels == k``."""
    on = np.r_[False, np.asarray(labels) == k, False]
    edges = np.flatnonzero(np.diff(on.astype(np.int8)))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))
