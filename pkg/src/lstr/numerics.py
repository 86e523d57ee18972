"""Dense 2-D array kernel with a reverse-mode gradient tape.

Every value flowing through the model is a :class:`Tensor` wrapping a 2-D
numpy array.  Primitive ops compute their forward value eagerly; when a
:class:`Tape` is active they also append a node holding the backward rule.
Outside a tape nothing is recorded, which is the inference fast path.

>>> with Tape() as tape:
...     x = Tensor(np.ones((2, 2)))
...     y = sum_all(matmul(x, x))
>>> grads = tape.gradient(y, [x])
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "PRIMITIVES",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "softmax_rows",
    "layer_norm",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "take_rows",
    "mean_rows",
    "pick",
    "log",
    "sum_all",
    "corrupt_backward",
    "gradient_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "lstr_active_tape", default=None
)
_corrupted: dict[str, float] = {}


class Tensor:
    """An immutable 2-D value, optionally tracked by the active tape."""

    __slots__ = ("value", "op", "__weakref__")

    def __init__(self, value, op: str = "leaf"):
        arr = np.asarray(value)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.value = arr
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    return Tensor(arr)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Recording order is a valid topological order, so :meth:`gradient`
    replays the nodes in exact reverse recording order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, op, out, inputs, backward):
        self.nodes.append(_Node(op, out, tuple(inputs), backward))

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Reverse pass from ``output``; returns one gradient per ``wrt`` entry.

        ``seed`` defaults to ones shaped like ``output``.  Tensors that do not
        influence ``output`` get exact zeros.
        """
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.value) if seed is None else np.asarray(seed)
        }
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            factor = _corrupted.get(node.op)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if factor is not None:
                    gi = gi * factor
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.value) if g is None else g)
        return out


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value, op)
    tape = _active_tape.get()
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.1):
    """Scale every gradient leaving ``op`` by ``factor``; for mutation tests."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    _corrupted[op] = factor
    try:
        yield
    finally:
        _corrupted.pop(op, None)


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-row or 1-col operand broadcasts."""
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        "sub", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with row/col broadcasting."""
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0).astype(a.dtype), (a,),
                   lambda g: (g * mask,))


def softmax_rows(m: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max.

    ``mask`` is a boolean array (True = allowed) of the same shape; disallowed
    entries get probability exactly 0.  Every row needs one allowed entry.
    """
    x = m.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax_rows: mask {mask.shape} vs scores {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", p, (m,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then ``gain * . + bias``."""
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be (1, {x.cols})"
        )
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value

    def backward(g):
        n = xv.shape[1]
        dxhat = g * gv
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _record("layer_norm", out, (x, gain, bias), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", a.value[:, start:stop], (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = np.cumsum([0] + [p.cols for p in parts])
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    return _record(
        "concat_cols", np.concatenate([p.value for p in parts], axis=1), parts,
        lambda g: [g[:, widths[i]:widths[i + 1]] for i in range(len(parts))],
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    heights = np.cumsum([0] + [p.rows for p in parts])
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    return _record(
        "concat_rows", np.concatenate([p.value for p in parts], axis=0), parts,
        lambda g: [g[heights[i]:heights[i + 1]] for i in range(len(parts))],
    )


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows by integer index (duplicates allowed)."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record("take_rows", a.value[index], (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    n = a.rows
    return _record(
        "mean_rows", a.value.mean(axis=0, keepdims=True), (a,),
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


def pick(a: Tensor, cols) -> Tensor:
    """Column ``cols[i]`` of row ``i`` for every row; returns (rows, 1)."""
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.rows,):
        raise ShapeError(f"pick: need {a.rows} column indices, got {cols.shape}")
    rows = np.arange(a.rows)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, cols] = g[:, 0]
        return (full,)

    return _record("pick", a.value[rows, cols][:, None], (a,), backward)


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient where the floor binds."""
    x = a.value
    active = x > floor
    safe = np.where(active, x, floor)
    return _record("log", np.log(safe), (a,), lambda g: (np.where(active, g / safe, 0.0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(
        "sum_all", a.value.sum(keepdims=True).reshape(1, 1), (a,),
        lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),),
    )


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "layer_norm": layer_norm,
    "slice_cols": slice_cols,
    "concat_cols": concat_cols,
    "concat_rows": concat_rows,
    "take_rows": take_rows,
    "mean_rows": mean_rows,
    "pick": pick,
    "log": log,
    "sum_all": sum_all,
}


# ----------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_error: float
    worst: tuple[int, int] | None = None  # (input index, flat entry)
    skipped: list[tuple[int, int]] = field(default_factory=list)
    entries: int = 0

    def __float__(self):
        return self.max_error


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   h: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central finite differences.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar with a fixed
    random weighting (drawn from ``seed``) so outputs with constant sums,
    such as softmax rows, still exercise their gradients.

    The error per entry is ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    Entries where the one-sided slopes disagree and the analytic value
    matches one of them are treated as kinks and skipped.
    """
    rng = np.random.default_rng(seed)
    xs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    xs = [x[None, :] if x.ndim == 1 else x for x in xs]

    probe = fn(*[Tensor(x) for x in xs])
    weights = rng.standard_normal(probe.shape)

    def scalar(arrs) -> float:
        return float((fn(*[Tensor(a) for a in arrs]).value * weights).sum())

    leaves = [Tensor(x) for x in xs]
    with Tape() as tape:
        out = fn(*leaves)
    analytic = tape.gradient(out, leaves, seed=weights)

    report = GradCheckReport(0.0)
    f0 = scalar(xs)
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        ga = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = scalar(xs)
            flat[j] = orig - h
            fm = scalar(xs)
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            a = float(ga[j])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            report.entries += 1
            if err >= 1e-4:
                right, left = (fp - f0) / h, (f0 - fm) / h
                one_sided_gap = abs(right - left) / max(abs(right), abs(left), 1e-8)
                near = min(abs(a - right), abs(a - left)) / max(abs(a), 1e-8)
                if one_sided_gap > 1e-2 and near < 1e-2:
                    report.skipped.append((i, j))
                    continue
            if err > report.max_error:
                report.max_error = err
                report.worst = (i, j)
    return report
