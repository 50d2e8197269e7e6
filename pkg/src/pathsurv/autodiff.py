"""Reverse-mode differentiation over dense 2-D float64 arrays.

A ``Tape`` records primitives applied to 2-D arrays and replays them in
reverse to accumulate exact gradients. The primitive set is deliberately
small: dense linear algebra plus the segment operations needed to move
values between gene, pathway-instance, and patient granularities
(``gather_rows``, ``segment_sum``, ``segment_softmax``, ``segment_mean``)
and a set-wise logsumexp used by the partial-likelihood objective.

Conventions:
  * every value is a row-major float64 2-D array; anything non-finite
    produced by a primitive raises ``NumericError`` immediately;
  * broadcasting exists only for row-wise bias addition (a 1 x d second
    operand); all other shape coercions are explicit;
  * gradients accumulate by addition when a node feeds several consumers;
  * a tape is append-only and single-writer; run independent tapes for
    parallel work.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError
from .kernels import segment_counts, segment_max, segment_sum

__all__ = ["SegmentMap", "Tape", "TapeNode", "finite_difference_check"]


class SegmentMap:
    """Assignment of each element (row) to one segment in [0, segment_count).

    Segments may be non-contiguous in element order; elements of one segment
    are always combined in element order, which keeps replays bit-identical.
    """

    __slots__ = ("index", "segment_count")

    def __init__(self, index, segment_count: int):
        index = np.ascontiguousarray(np.asarray(index, dtype=np.int64))
        if index.ndim != 1:
            raise ValueError("segment index must be one-dimensional")
        segment_count = int(segment_count)
        if segment_count < 0:
            raise ValueError("segment_count must be nonnegative")
        if index.size:
            lo, hi = int(index.min()), int(index.max())
            if lo < 0 or hi >= segment_count:
                raise IndexError(
                    f"segment index range [{lo}, {hi}] outside "
                    f"[0, {segment_count})"
                )
        self.index = index
        self.segment_count = segment_count

    def __len__(self) -> int:
        return self.index.size

    def compose(self, outer: "SegmentMap") -> "SegmentMap":
        """Map elements through ``self`` then ``outer`` (segments of ``self``
        must be elements of ``outer``)."""
        if len(outer) != self.segment_count:
            raise ValueError("outer map must index this map's segments")
        return SegmentMap(outer.index[self.index], outer.segment_count)

    def counts(self) -> np.ndarray:
        return segment_counts(self.index, self.segment_count)


@dataclass
class TapeNode:
    """Read-only view of one recorded primitive."""

    id: int
    op: str
    inputs: tuple
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    attrs: dict = field(default_factory=dict)


def _as_value(array) -> np.ndarray:
    value = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if value.ndim != 2:
        raise ValueError(f"tape values must be 2-D, got shape {value.shape}")
    return value


class Tape:
    """Append-only record of primitives; nodes are referenced by integer id."""

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple] = []
        self._values: list[np.ndarray] = []
        self._attrs: list[dict] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._ops)

    # -- construction -----------------------------------------------------

    def input(self, array) -> int:
        """Record a leaf value (parameter or data)."""
        return self._append("input", (), _as_value(array), {})

    def push(self, op: str, inputs: Sequence[int], **attrs) -> int:
        """Apply primitive ``op`` to existing nodes and record the result."""
        if op not in _FORWARD:
            raise ValueError(f"unknown primitive {op!r}")
        inputs = tuple(int(i) for i in inputs)
        n = len(self._ops)
        for i in inputs:
            if not 0 <= i < n:
                raise IndexError(f"input id {i} not on tape")
        values = [self._values[i] for i in inputs]
        out = _FORWARD[op](values, attrs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"primitive {op!r} produced non-finite values")
        return self._append(op, inputs, out, attrs)

    def _append(self, op, inputs, value, attrs) -> int:
        self._ops.append(op)
        self._inputs.append(inputs)
        self._values.append(value)
        self._attrs.append(attrs)
        return len(self._ops) - 1

    # -- access -----------------------------------------------------------

    def value(self, nid: int) -> np.ndarray:
        return self._values[nid]

    def grad(self, nid: int) -> np.ndarray:
        """Gradient from the last backward(); zeros for non-ancestors."""
        g = self._grads.get(nid)
        if g is None:
            return np.zeros_like(self._values[nid])
        return g

    def node(self, nid: int) -> TapeNode:
        return TapeNode(
            id=nid,
            op=self._ops[nid],
            inputs=self._inputs[nid],
            value=self._values[nid],
            grad=self._grads.get(nid),
            attrs=self._attrs[nid],
        )

    # -- convenience wrappers ----------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        return self.push("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self.push("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.push("mul", (a, b))

    def tanh(self, a: int) -> int:
        return self.push("tanh", (a,))

    def exp(self, a: int) -> int:
        return self.push("exp", (a,))

    def log(self, a: int) -> int:
        return self.push("log", (a,))

    def neg(self, a: int) -> int:
        return self.push("neg", (a,))

    def concat_cols(self, *nodes: int) -> int:
        return self.push("concat_cols", nodes)

    def gather_rows(self, a: int, seg: SegmentMap) -> int:
        return self.push("gather_rows", (a,), seg=seg)

    def segment_sum(self, a: int, seg: SegmentMap) -> int:
        return self.push("segment_sum", (a,), seg=seg)

    def segment_softmax(self, a: int, seg: SegmentMap) -> int:
        return self.push("segment_softmax", (a,), seg=seg)

    def segment_mean(self, a: int, seg: SegmentMap) -> int:
        return self.push("segment_mean", (a,), seg=seg)

    def logsumexp_sets(self, a: int, sets) -> int:
        sets = [np.ascontiguousarray(np.asarray(s, dtype=np.int64)) for s in sets]
        return self.push("logsumexp_sets", (a,), sets=sets)

    def scale(self, a: int, c: float) -> int:
        return self.push("scale", (a,), c=float(c))

    def sum_squares(self, a: int) -> int:
        return self.push("sum_squares", (a,))

    # -- reverse sweep ------------------------------------------------------

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar loss into every ancestor.

        Returns the gradient table {node id -> gradient array}; nodes absent
        from the table have zero gradient.
        """
        value = self._values[loss]
        if value.shape != (1, 1):
            raise ValueError(f"loss must be 1x1, got shape {value.shape}")
        self._grads = {loss: np.ones((1, 1))}
        for nid in range(loss, -1, -1):
            g = self._grads.get(nid)
            if g is None:
                continue
            op = self._ops[nid]
            if op == "input":
                continue
            _BACKWARD[op](self, nid, g)
        return dict(self._grads)

    def _accumulate(self, nid: int, grad: np.ndarray) -> None:
        slot = self._grads.get(nid)
        if slot is None:
            self._grads[nid] = grad.copy()
        else:
            slot += grad


# -- forward rules -----------------------------------------------------------


def _fwd_matmul(values, attrs):
    a, b = values
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _fwd_add(values, attrs):
    a, b = values
    if a.shape == b.shape:
        return a + b
    if b.shape == (1, a.shape[1]):
        return a + b
    raise ValueError(f"add shape mismatch {a.shape} + {b.shape}")


def _fwd_mul(values, attrs):
    a, b = values
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}")
    return a * b


def _fwd_concat_cols(values, attrs):
    rows = {v.shape[0] for v in values}
    if len(values) == 0 or len(rows) != 1:
        raise ValueError("concat_cols requires inputs with a common row count")
    return np.concatenate(values, axis=1)


def _check_segments(x, seg: SegmentMap, op: str):
    if len(seg) != x.shape[0]:
        raise ValueError(
            f"{op}: segment map covers {len(seg)} elements but input has "
            f"{x.shape[0]} rows"
        )


def _fwd_gather_rows(values, attrs):
    (x,) = values
    seg: SegmentMap = attrs["seg"]
    if seg.segment_count != x.shape[0]:
        raise ValueError(
            f"gather_rows: map targets {seg.segment_count} rows but input "
            f"has {x.shape[0]}"
        )
    return x[seg.index]


def _fwd_segment_sum(values, attrs):
    (x,) = values
    seg: SegmentMap = attrs["seg"]
    _check_segments(x, seg, "segment_sum")
    return segment_sum(x, seg.index, seg.segment_count)


def _fwd_segment_mean(values, attrs):
    (x,) = values
    seg: SegmentMap = attrs["seg"]
    _check_segments(x, seg, "segment_mean")
    total = segment_sum(x, seg.index, seg.segment_count)
    counts = seg.counts()
    nonempty = counts > 0
    total[nonempty] /= counts[nonempty, None]
    return total


def _fwd_segment_softmax(values, attrs):
    (x,) = values
    seg: SegmentMap = attrs["seg"]
    _check_segments(x, seg, "segment_softmax")
    # Per-segment max subtraction keeps exponentials bounded.
    peak = segment_max(x, seg.index, seg.segment_count)
    shifted = np.exp(x - peak[seg.index])
    denom = segment_sum(shifted, seg.index, seg.segment_count)
    return shifted / denom[seg.index]


def _fwd_logsumexp_sets(values, attrs):
    (x,) = values
    if x.shape[1] != 1:
        raise ValueError("logsumexp_sets expects a column vector")
    out = np.empty((len(attrs["sets"]), 1), dtype=np.float64)
    for k, rows in enumerate(attrs["sets"]):
        if rows.size == 0:
            raise ValueError("logsumexp_sets: empty set")
        if rows.min() < 0 or rows.max() >= x.shape[0]:
            raise IndexError("logsumexp_sets: row index out of range")
        sub = x[rows, 0]
        peak = sub.max()
        out[k, 0] = peak + np.log(np.exp(sub - peak).sum())
    return out


def _fwd_scale(values, attrs):
    (x,) = values
    c = attrs["c"]
    if not np.isfinite(c):
        raise ValueError("scale factor must be finite")
    return c * x


def _fwd_sum_squares(values, attrs):
    (x,) = values
    return np.array([[float(np.sum(x * x))]])


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "tanh": lambda v, a: np.tanh(v[0]),
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "neg": lambda v, a: -v[0],
    "concat_cols": _fwd_concat_cols,
    "gather_rows": _fwd_gather_rows,
    "segment_sum": _fwd_segment_sum,
    "segment_softmax": _fwd_segment_softmax,
    "segment_mean": _fwd_segment_mean,
    "logsumexp_sets": _fwd_logsumexp_sets,
    "scale": _fwd_scale,
    "sum_squares": _fwd_sum_squares,
}


# -- backward rules -----------------------------------------------------------


def _bwd_matmul(tape: Tape, nid: int, g):
    a, b = tape._inputs[nid]
    va, vb = tape._values[a], tape._values[b]
    tape._accumulate(a, g @ vb.T)
    tape._accumulate(b, va.T @ g)


def _bwd_add(tape: Tape, nid: int, g):
    a, b = tape._inputs[nid]
    tape._accumulate(a, g)
    if tape._values[b].shape == g.shape:
        tape._accumulate(b, g)
    else:
        tape._accumulate(b, g.sum(axis=0, keepdims=True))


def _bwd_mul(tape: Tape, nid: int, g):
    a, b = tape._inputs[nid]
    tape._accumulate(a, g * tape._values[b])
    tape._accumulate(b, g * tape._values[a])


def _bwd_tanh(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    y = tape._values[nid]
    tape._accumulate(a, g * (1.0 - y * y))


def _bwd_exp(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    tape._accumulate(a, g * tape._values[nid])


def _bwd_log(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    tape._accumulate(a, g / tape._values[a])


def _bwd_neg(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    tape._accumulate(a, -g)


def _bwd_concat_cols(tape: Tape, nid: int, g):
    start = 0
    for a in tape._inputs[nid]:
        width = tape._values[a].shape[1]
        tape._accumulate(a, g[:, start : start + width])
        start += width


def _bwd_gather_rows(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    seg: SegmentMap = tape._attrs[nid]["seg"]
    tape._accumulate(a, segment_sum(g, seg.index, seg.segment_count))


def _bwd_segment_sum(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    seg: SegmentMap = tape._attrs[nid]["seg"]
    tape._accumulate(a, g[seg.index])


def _bwd_segment_mean(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    seg: SegmentMap = tape._attrs[nid]["seg"]
    counts = seg.counts()
    tape._accumulate(a, g[seg.index] / counts[seg.index, None])


def _bwd_segment_softmax(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    seg: SegmentMap = tape._attrs[nid]["seg"]
    y = tape._values[nid]
    inner = segment_sum(g * y, seg.index, seg.segment_count)
    tape._accumulate(a, y * (g - inner[seg.index]))


def _bwd_logsumexp_sets(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    x = tape._values[a]
    y = tape._values[nid]
    gx = np.zeros_like(x)
    for k, rows in enumerate(tape._attrs[nid]["sets"]):
        gx[rows, 0] += g[k, 0] * np.exp(x[rows, 0] - y[k, 0])
    tape._accumulate(a, gx)


def _bwd_scale(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    tape._accumulate(a, tape._attrs[nid]["c"] * g)


def _bwd_sum_squares(tape: Tape, nid: int, g):
    (a,) = tape._inputs[nid]
    tape._accumulate(a, 2.0 * g[0, 0] * tape._values[a])


_BACKWARD: dict[str, Callable] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "mul": _bwd_mul,
    "tanh": _bwd_tanh,
    "exp": _bwd_exp,
    "log": _bwd_log,
    "neg": _bwd_neg,
    "concat_cols": _bwd_concat_cols,
    "gather_rows": _bwd_gather_rows,
    "segment_sum": _bwd_segment_sum,
    "segment_softmax": _bwd_segment_softmax,
    "segment_mean": _bwd_segment_mean,
    "logsumexp_sets": _bwd_logsumexp_sets,
    "scale": _bwd_scale,
    "sum_squares": _bwd_sum_squares,
}


def finite_difference_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    step: float,
    coords: Optional[np.ndarray] = None,
) -> float:
    """Compare an analytic gradient against central finite differences.

    ``f`` maps a parameter array to ``(scalar value, gradient array)`` and
    must be deterministic. Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. ``coords`` optionally
    restricts the sweep to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    value, analytic = f(x)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NumericError("objective returned non-finite value or gradient")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError("gradient shape does not match parameter shape")
    flat = x.ravel()
    if coords is None:
        coords = np.arange(flat.size)
    worst = 0.0
    for idx in coords:
        probe = flat.copy()
        probe[idx] += step
        up, _ = f(probe.reshape(x.shape))
        probe[idx] -= 2.0 * step
        down, _ = f(probe.reshape(x.shape))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("objective returned non-finite value")
        numeric = (up - down) / (2.0 * step)
        a = analytic.ravel()[idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
