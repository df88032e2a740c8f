"""Dense-tensor math with reverse-mode differentiation.

Tensors wrap numpy arrays; operations record onto an explicit Tape whose
append order is the topological order.  There is no implicit broadcasting:
binary elementwise ops require equal shapes, and every shape change (bias
rows, per-row scales, scalar fills, batched-matrix scales) goes through an
explicit op with an explicit adjoint.  Scalars are shape-() tensors.

Backward passes come in two flavors.  A plain backward runs its adjoints
detached (raw array math).  With ``create_graph=True`` every adjoint is
re-expressed through the public ops and recorded on the same tape, so the
gradient tensors are themselves differentiable; that is what makes
gradients of gradients possible.  Adjoint closures pick the path by
checking whether recording is active when they run.

Default precision is float64 (gradient checks need it); float32 is
selectable by constructing tensors with that dtype.  Dtypes must agree
across the operands of an op.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for errors raised by the tape machinery."""


class ShapeError(AutodiffError):
    """Operand shapes or dtypes incompatible with the requested op."""


class TapeError(AutodiffError):
    """Tape misuse: foreign-tape operands, non-scalar roots, detached roots."""


class NonFiniteError(AutodiffError):
    """A checked-mode computation produced NaN or Inf."""


class _State(threading.local):
    def __init__(self):
        self.tape = None
        self.recording = True
        self.checked = False
        self.in_backward = 0


_STATE = _State()


def _tls() -> _State:
    return _STATE


@contextlib.contextmanager
def suspend_recording():
    """Treat all tensors as constants inside the block (no nodes recorded)."""
    prev = _STATE.recording
    _STATE.recording = False
    try:
        yield
    finally:
        _STATE.recording = prev


@contextlib.contextmanager
def recording(on: bool = True):
    """Force recording on or off inside the block."""
    prev = _STATE.recording
    _STATE.recording = on
    try:
        yield
    finally:
        _STATE.recording = prev


@contextlib.contextmanager
def checked_mode(on: bool = True):
    """Raise NonFiniteError whenever an op output contains NaN/Inf."""
    prev = _STATE.checked
    _STATE.checked = on
    try:
        yield
    finally:
        _STATE.checked = prev


def assert_finite(data: np.ndarray, what: str = "tensor"):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


class Node:
    """One recorded operation: kind, input nodes, and its adjoint closure."""

    __slots__ = ("idx", "op", "inputs", "vjp", "tape")

    def __init__(self, idx, op, inputs, vjp, tape):
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.tape = tape


class Tensor:
    """Dense row-major array, optionally attached to a tape node."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Node | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f" node={self.node.idx}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def tensor(data, dtype=None) -> Tensor:
    """Wrap data as a constant tensor (not attached to any tape)."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


class Tape:
    """Ordered record of operations; append order is the topological order.

    Used as a context manager it becomes the active tape for the current
    thread.  ``gradients`` holds per-leaf arrays accumulated additively by
    repeated ``backward`` calls until ``reset_gradients``.
    ``higher_order_nodes`` counts ops recorded while a backward pass was
    executing, i.e. the footprint of gradient-of-gradient bookkeeping.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self.higher_order_nodes = 0
        self._prev_tape = None

    def leaf(self, value) -> Tensor:
        """Register an input tensor as a differentiable leaf on this tape."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        node = Node(len(self.nodes), "leaf", (), None, self)
        self.nodes.append(node)
        return Tensor(data, node)

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        """Accumulated gradient for a leaf tensor, or None if never reached."""
        if t.node is None or t.node.tape is not self:
            raise TapeError("tensor is not a node of this tape")
        return self.gradients.get(t.node.idx)

    def reset_gradients(self):
        self.gradients.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._prev_tape = _STATE.tape
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._prev_tape
        self._prev_tape = None
        return False


def watch(t: Tensor) -> Tensor:
    """Register a tensor as a leaf on the currently active tape."""
    tape = _STATE.tape
    if tape is None:
        raise TapeError("watch requires an active tape")
    return tape.leaf(t)


def _append(tape: Tape, op: str, inputs, vjp, out: Tensor):
    node = Node(len(tape.nodes), op, inputs, vjp, tape)
    tape.nodes.append(node)
    out.node = node
    if _STATE.in_backward:
        tape.higher_order_nodes += 1


def _node_on(tape: Tape, x: Tensor):
    n = x.node
    if n is None:
        return None
    if n.tape is not tape:
        raise TapeError("operand belongs to a different tape")
    return n


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary_guard(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_guard(a, b, "add")
    out = Tensor(a.data + b.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na, nb = _node_on(tape, a), _node_on(tape, b)
        if na is not None or nb is not None:
            def vjp(g):
                return (g if na is not None else None,
                        g if nb is not None else None)
            _append(tape, "add", (na, nb), vjp, out)
    if s.checked:
        assert_finite(out.data, "add")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_guard(a, b, "sub")
    out = Tensor(a.data - b.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na, nb = _node_on(tape, a), _node_on(tape, b)
        if na is not None or nb is not None:
            def vjp(g):
                if nb is None:
                    return (g, None)
                gb = neg(g) if _STATE.recording else Tensor(-g.data)
                return (g if na is not None else None, gb)
            _append(tape, "sub", (na, nb), vjp, out)
    if s.checked:
        assert_finite(out.data, "sub")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_guard(a, b, "mul")
    out = Tensor(a.data * b.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na, nb = _node_on(tape, a), _node_on(tape, b)
        if na is not None or nb is not None:
            def vjp(g):
                if _STATE.recording:
                    return (mul(g, b) if na is not None else None,
                            mul(g, a) if nb is not None else None)
                gd = g.data
                return (Tensor(gd * b.data) if na is not None else None,
                        Tensor(gd * a.data) if nb is not None else None)
            _append(tape, "mul", (na, nb), vjp, out)
    if s.checked:
        assert_finite(out.data, "mul")
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                return (neg(g) if _STATE.recording else Tensor(-g.data),)
            _append(tape, "neg", (na,), vjp, out)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not a differentiable input)."""
    c = float(c)
    out = Tensor(a.data * c)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                return (scale(g, c) if _STATE.recording else Tensor(g.data * c),)
            _append(tape, "scale", (na,), vjp, out)
    if s.checked:
        assert_finite(out.data, "scale")
    return out


def affine_const(a: Tensor, mul_c: float, add_c: float) -> Tensor:
    """Elementwise a*mul_c + add_c with python constants."""
    mul_c, add_c = float(mul_c), float(add_c)
    out = Tensor(a.data * mul_c + add_c)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                return (scale(g, mul_c) if _STATE.recording
                        else Tensor(g.data * mul_c),)
            _append(tape, "affine_const", (na,), vjp, out)
    return out


def one_minus_sq(a: Tensor) -> Tensor:
    """Elementwise 1 - a**2 (the tanh derivative shape)."""
    out = Tensor(1.0 - a.data * a.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (mul(g, scale(a, -2.0)),)
                return (Tensor(g.data * (-2.0 * a.data)),)
            _append(tape, "one_minus_sq", (na,), vjp, out)
    return out


def sig_deriv(a: Tensor) -> Tensor:
    """Elementwise a*(1 - a) (the sigmoid derivative shape)."""
    out = Tensor(a.data * (1.0 - a.data))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (mul(g, affine_const(a, -2.0, 1.0)),)
                return (Tensor(g.data * (1.0 - 2.0 * a.data)),)
            _append(tape, "sig_deriv", (na,), vjp, out)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (mul(g, one_minus_sq(out)),)
                od = out.data
                return (Tensor(g.data * (1.0 - od * od)),)
            _append(tape, "tanh", (na,), vjp, out)
    if s.checked:
        assert_finite(out.data, "tanh")
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (mul(g, sig_deriv(out)),)
                od = out.data
                return (Tensor(g.data * (od * (1.0 - od))),)
            _append(tape, "sigmoid", (na,), vjp, out)
    if s.checked:
        assert_finite(out.data, "sigmoid")
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (mul(g, out),)
                return (Tensor(g.data * out.data),)
            _append(tape, "exp", (na,), vjp, out)
    if s.checked:
        assert_finite(out.data, "exp")
    return out


def ge_const(a: Tensor, c: float) -> Tensor:
    """Indicator (a >= c) as 0/1 values; gradient is zero everywhere."""
    out = Tensor((a.data >= c).astype(a.data.dtype))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                return (None,)
            _append(tape, "ge_const", (na,), vjp, out)
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis of a 2-d tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-d input, got {a.shape}")
    x = a.data
    m = x.max(axis=1, keepdims=True)
    sh = x - m
    lse = np.log(np.exp(sh).sum(axis=1, keepdims=True))
    out = Tensor(sh - lse)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            n_cols = out.data.shape[1]
            def vjp(g):
                if _STATE.recording:
                    sm = exp(out)
                    return (sub(g, mul(sm, bcast_cols(sum_cols(g), n_cols))),)
                gd = g.data
                return (Tensor(gd - np.exp(out.data)
                               * gd.sum(axis=1, keepdims=True)),)
            _append(tape, "log_softmax", (na,), vjp, out)
    if s.checked:
        assert_finite(out.data, "log_softmax")
    return out


def bce_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits; target is 0/1 data."""
    _binary_guard(logits, target, "bce_logits")
    x = logits.data
    t = target.data
    out = Tensor(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x))))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        nx = _node_on(tape, logits)
        _node_on(tape, target)
        if nx is not None:
            def vjp(g):
                # target is labels: no gradient to it
                if _STATE.recording:
                    return (mul(g, sub(sigmoid(logits), target)), None)
                e = np.exp(-np.abs(x))
                sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
                return (Tensor(g.data * (sig - t)), None)
            _append(tape, "bce_logits", (nx, None), vjp, out)
    if s.checked:
        assert_finite(out.data, "bce_logits")
    return out


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-d matrix product [m,k] x [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape}, {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree ({a.shape} x {b.shape})")
    out = Tensor(a.data @ b.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na, nb = _node_on(tape, a), _node_on(tape, b)
        if na is not None or nb is not None:
            def vjp(g):
                if _STATE.recording:
                    ga = matmul(g, transpose(b)) if na is not None else None
                    gb = matmul(transpose(a), g) if nb is not None else None
                    return (ga, gb)
                gd = g.data
                return (Tensor(gd @ b.data.T) if na is not None else None,
                        Tensor(a.data.T @ gd) if nb is not None else None)
            _append(tape, "matmul", (na, nb), vjp, out)
    if s.checked:
        assert_finite(out.data, "matmul")
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + bias-row: [B,n_in] x [n_in,n_out] + [1,n_out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("affine: expected 2-d operands")
    if x.data.shape[1] != w.data.shape[0] or b.data.shape != (1, w.data.shape[1]):
        raise ShapeError(
            f"affine: shapes disagree ({x.shape} x {w.shape} + {b.shape})")
    out = Tensor(x.data @ w.data + b.data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        nx, nw, nb = _node_on(tape, x), _node_on(tape, w), _node_on(tape, b)
        if nx is not None or nw is not None or nb is not None:
            def vjp(g):
                if _STATE.recording:
                    gx = matmul(g, transpose(w)) if nx is not None else None
                    gw = matmul(transpose(x), g) if nw is not None else None
                    gb = sum_rows(g) if nb is not None else None
                    return (gx, gw, gb)
                gd = g.data
                return (Tensor(gd @ w.data.T) if nx is not None else None,
                        Tensor(x.data.T @ gd) if nw is not None else None,
                        Tensor(gd.sum(axis=0, keepdims=True)) if nb is not None else None)
            _append(tape, "affine", (nx, nw, nb), vjp, out)
    if s.checked:
        assert_finite(out.data, "affine")
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d input, got {a.shape}")
    out = Tensor(a.data.T)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                return (transpose(g) if _STATE.recording else Tensor(g.data.T),)
            _append(tape, "transpose", (na,), vjp, out)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [B,m,k] x [B,k,n] -> [B,m,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: expected 3-d operands, got {a.shape}, {b.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm: shapes disagree ({a.shape} x {b.shape})")
    out = Tensor(np.matmul(a.data, b.data))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na, nb = _node_on(tape, a), _node_on(tape, b)
        if na is not None or nb is not None:
            def vjp(g):
                if _STATE.recording:
                    ga = bmm(g, btranspose(b)) if na is not None else None
                    gb = bmm(btranspose(a), g) if nb is not None else None
                    return (ga, gb)
                gd = g.data
                ga = Tensor(np.matmul(gd, b.data.transpose(0, 2, 1))) \
                    if na is not None else None
                gb = Tensor(np.matmul(a.data.transpose(0, 2, 1), gd)) \
                    if nb is not None else None
                return (ga, gb)
            _append(tape, "bmm", (na, nb), vjp, out)
    if s.checked:
        assert_finite(out.data, "bmm")
    return out


def btranspose(a: Tensor) -> Tensor:
    if a.data.ndim != 3:
        raise ShapeError(f"btranspose: expected 3-d input, got {a.shape}")
    out = Tensor(a.data.transpose(0, 2, 1))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                return (btranspose(g) if _STATE.recording
                        else Tensor(g.data.transpose(0, 2, 1)),)
            _append(tape, "btranspose", (na,), vjp, out)
    return out


# ---------------------------------------------------------------------------
# shape ops (all linear; adjoints are the dual shape op)
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    out_data = a.data.reshape(shape)  # numpy validates the element count
    out = Tensor(out_data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            old = a.data.shape
            def vjp(g):
                return (reshape(g, old) if _STATE.recording
                        else Tensor(g.data.reshape(old)),)
            _append(tape, "reshape", (na,), vjp, out)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and p.data.shape[ax] != parts[0].data.shape[ax]:
                raise ShapeError(
                    f"concat: shapes {parts[0].shape} / {p.shape} differ off-axis")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        nodes = tuple(_node_on(tape, p) for p in parts)
        if any(n is not None for n in nodes):
            widths = [p.data.shape[axis] for p in parts]
            def vjp(g):
                grads, start = [], 0
                use_ops = _STATE.recording
                for n, w in zip(nodes, widths):
                    if n is None:
                        grads.append(None)
                    elif use_ops:
                        grads.append(slice_axis(g, axis, start, start + w))
                    else:
                        sl = [slice(None)] * g.data.ndim
                        sl[axis] = slice(start, start + w)
                        grads.append(Tensor(g.data[tuple(sl)]))
                    start += w
                return tuple(grads)
            _append(tape, "concat", nodes, vjp, out)
    if s.checked:
        assert_finite(out.data, "concat")
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    dim = a.data.shape[axis]
    if not (0 <= start <= stop <= dim):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for dim {dim}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)])
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (pad_axis(g, axis, start, dim - stop),)
                shape = list(g.data.shape)
                shape[axis] = dim
                buf = np.zeros(shape, dtype=g.data.dtype)
                buf[tuple(sl)] = g.data
                return (Tensor(buf),)
            _append(tape, "slice_axis", (na,), vjp, out)
    return out


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Embed into a zero tensor widened along one axis."""
    if before < 0 or after < 0:
        raise ShapeError("pad_axis: negative padding")
    shape = list(a.data.shape)
    width = shape[axis]
    shape[axis] += before + after
    data = np.zeros(shape, dtype=a.data.dtype)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(before, before + width)
    data[tuple(sl)] = a.data
    out = Tensor(data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (slice_axis(g, axis, before, before + width),)
                return (Tensor(g.data[tuple(sl)]),)
            _append(tape, "pad_axis", (na,), vjp, out)
    return out


# ---------------------------------------------------------------------------
# reductions and their dual broadcasts
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            shape = a.data.shape
            def vjp(g):
                if _STATE.recording:
                    return (bcast_full(g, shape),)
                return (Tensor(np.full(shape, g.data.reshape(()),
                                       dtype=g.data.dtype)),)
            _append(tape, "sum_all", (na,), vjp, out)
    if s.checked:
        assert_finite(out.data, "sum_all")
    return out


def bcast_full(s_t: Tensor, shape: Sequence[int]) -> Tensor:
    """Fill a tensor of the given shape with a scalar."""
    if s_t.data.size != 1:
        raise ShapeError("bcast_full: input must be scalar")
    out = Tensor(np.full(tuple(shape), s_t.data.reshape(()), dtype=s_t.data.dtype))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, s_t)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (sum_all(g),)
                return (Tensor(np.asarray(g.data.sum(), dtype=g.data.dtype)),)
            _append(tape, "bcast_full", (na,), vjp, out)
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_cols(a: Tensor) -> Tensor:
    """[B,n] -> [B,1] summing each row."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_cols: expected 2-d input, got {a.shape}")
    out = Tensor(a.data.sum(axis=1, keepdims=True))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            n = a.data.shape[1]
            def vjp(g):
                if _STATE.recording:
                    return (bcast_cols(g, n),)
                return (Tensor(np.broadcast_to(g.data, (g.data.shape[0], n))),)
            _append(tape, "sum_cols", (na,), vjp, out)
    return out


def bcast_cols(a: Tensor, n: int) -> Tensor:
    """[B,1] -> [B,n] repeating the column."""
    if a.data.ndim != 2 or a.data.shape[1] != 1:
        raise ShapeError(f"bcast_cols: expected [B,1] input, got {a.shape}")
    out = Tensor(np.broadcast_to(a.data, (a.data.shape[0], n)))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (sum_cols(g),)
                return (Tensor(g.data.sum(axis=1, keepdims=True)),)
            _append(tape, "bcast_cols", (na,), vjp, out)
    return out


def sum_rows(a: Tensor) -> Tensor:
    """[B,n] -> [1,n] summing each column."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-d input, got {a.shape}")
    out = Tensor(a.data.sum(axis=0, keepdims=True))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            b = a.data.shape[0]
            def vjp(g):
                if _STATE.recording:
                    return (bcast_rows(g, b),)
                return (Tensor(np.broadcast_to(g.data, (b, g.data.shape[1]))),)
            _append(tape, "sum_rows", (na,), vjp, out)
    return out


def bcast_rows(a: Tensor, b: int) -> Tensor:
    """[1,n] -> [B,n] repeating the row."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ShapeError(f"bcast_rows: expected [1,n] input, got {a.shape}")
    out = Tensor(np.broadcast_to(a.data, (b, a.data.shape[1])))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (sum_rows(g),)
                return (Tensor(g.data.sum(axis=0, keepdims=True)),)
            _append(tape, "bcast_rows", (na,), vjp, out)
    return out


def sum_mat(a: Tensor) -> Tensor:
    """[B,m,n] -> [B,1] summing each batch matrix."""
    if a.data.ndim != 3:
        raise ShapeError(f"sum_mat: expected 3-d input, got {a.shape}")
    out = Tensor(a.data.sum(axis=(1, 2)).reshape(a.data.shape[0], 1))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            mn = a.data.shape[1:]
            def vjp(g):
                if _STATE.recording:
                    return (bcast_mat(g, mn),)
                return (Tensor(np.broadcast_to(
                    g.data.reshape(-1, 1, 1), (g.data.shape[0],) + mn)),)
            _append(tape, "sum_mat", (na,), vjp, out)
    return out


def bcast_mat(a: Tensor, mn: Sequence[int]) -> Tensor:
    """[B,1] -> [B,m,n] repeating the per-batch scalar over a matrix."""
    if a.data.ndim != 2 or a.data.shape[1] != 1:
        raise ShapeError(f"bcast_mat: expected [B,1] input, got {a.shape}")
    m, n = int(mn[0]), int(mn[1])
    out = Tensor(np.broadcast_to(a.data.reshape(-1, 1, 1),
                                 (a.data.shape[0], m, n)))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (sum_mat(g),)
                return (Tensor(g.data.sum(axis=(1, 2)).reshape(-1, 1)),)
            _append(tape, "bcast_mat", (na,), vjp, out)
    return out


# ---------------------------------------------------------------------------
# index ops (indices are plain integer arrays, never differentiated)
# ---------------------------------------------------------------------------

def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of [V,d] by an integer index vector -> [len(idx),d]."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d table, got {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx])
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, table)
        if na is not None:
            v = table.data.shape[0]
            def vjp(g):
                if _STATE.recording:
                    return (scatter_rows(g, idx, v),)
                buf = np.zeros((v, g.data.shape[1]), dtype=g.data.dtype)
                np.add.at(buf, idx, g.data)
                return (Tensor(buf),)
            _append(tape, "gather_rows", (na,), vjp, out)
    return out


def scatter_rows(a: Tensor, idx: np.ndarray, v: int) -> Tensor:
    """Scatter-add rows of [len(idx),d] into a zero [V,d] table."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((v, a.data.shape[1]), dtype=a.data.dtype)
    np.add.at(data, idx, a.data)
    out = Tensor(data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (gather_rows(g, idx),)
                return (Tensor(g.data[idx]),)
            _append(tape, "scatter_rows", (na,), vjp, out)
    return out


def gather_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row of [B,V] -> [B,1]."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_cols: expected 2-d input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.data.shape[0],):
        raise ShapeError("gather_cols: need one index per row")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx].reshape(-1, 1))
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            v = a.data.shape[1]
            def vjp(g):
                if _STATE.recording:
                    return (scatter_cols(g, idx, v),)
                buf = np.zeros((g.data.shape[0], v), dtype=g.data.dtype)
                buf[rows, idx] = g.data[:, 0]
                return (Tensor(buf),)
            _append(tape, "gather_cols", (na,), vjp, out)
    return out


def scatter_cols(a: Tensor, idx: np.ndarray, v: int) -> Tensor:
    """Place the [B,1] values into a zero [B,V] at one column per row."""
    if a.data.ndim != 2 or a.data.shape[1] != 1:
        raise ShapeError(f"scatter_cols: expected [B,1] input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = np.zeros((a.data.shape[0], v), dtype=a.data.dtype)
    data[rows, idx] = a.data[:, 0]
    out = Tensor(data)
    s = _STATE
    tape = s.tape
    if tape is not None and s.recording:
        na = _node_on(tape, a)
        if na is not None:
            def vjp(g):
                if _STATE.recording:
                    return (gather_cols(g, idx),)
                return (Tensor(g.data[rows, idx].reshape(-1, 1)),)
            _append(tape, "scatter_cols", (na,), vjp, out)
    return out


# ---------------------------------------------------------------------------
# losses and the elementwise dispatcher
# ---------------------------------------------------------------------------

def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Squared L2 norm of (pred - target), as a scalar tensor."""
    _binary_guard(pred, target, "mse")
    d = sub(pred, target)
    return sum_all(mul(d, d))


_ELEMENTWISE = {
    "tanh": lambda inputs, axis: tanh(*inputs),
    "sigmoid": lambda inputs, axis: sigmoid(*inputs),
    "add": lambda inputs, axis: add(*inputs),
    "sub": lambda inputs, axis: sub(*inputs),
    "mul": lambda inputs, axis: mul(*inputs),
    "scale": lambda inputs, axis: scale(*inputs),
    "mean": lambda inputs, axis: mean_all(*inputs),
    "concat": lambda inputs, axis: concat(inputs, axis=axis),
}


def apply_elementwise(op: str, *inputs, axis: int | None = None) -> Tensor:
    """Dispatch by op kind; raises on names outside the supported set."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op kind: {op!r}") from None
    return fn(inputs, axis)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _check_scalar_root(root: Tensor):
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")


def _accumulate(grads: dict, j: int, c: Tensor, use_ops: bool):
    prev = grads.get(j)
    if prev is None:
        grads[j] = c
    elif use_ops:
        grads[j] = add(prev, c)
    else:
        grads[j] = Tensor(prev.data + c.data)


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
         stop: Iterable[Tensor] = ()) -> list[Tensor]:
    """Gradients of a scalar root w.r.t. selected tensors.

    Traversal is restricted to the tape window between the earliest ``wrt``
    node and the root, visiting only nodes that depend on ``wrt``.  Tensors
    in ``stop`` are treated as constants: paths through them contribute
    nothing (they remain inputs of any recorded adjoint ops, so a later
    backward pass still differentiates through the returned expressions).
    With ``create_graph`` the adjoint computation is recorded on the same
    tape; otherwise it runs detached.
    """
    _check_scalar_root(root)
    wrt = list(wrt)
    if root.node is None:
        return [Tensor(np.zeros_like(w.data)) for w in wrt]
    tape = root.node.tape
    for w in wrt:
        if w.node is None or w.node.tape is not tape:
            raise TapeError("wrt tensor is not on the root's tape")
    wrt_ids = [w.node.idx for w in wrt]
    wrt_set = set(wrt_ids)
    stop_ids = {s.node.idx for s in stop
                if s.node is not None and s.node.tape is tape}
    nodes = tape.nodes
    hi = root.node.idx
    lo = min(wrt_ids)

    def zeros():
        return [Tensor(np.zeros_like(w.data)) for w in wrt]

    if hi < lo:
        return zeros()

    # Forward pass over the window: which nodes depend on wrt?
    dep = bytearray(hi - lo + 1)
    for i in wrt_ids:
        if i <= hi:
            dep[i - lo] = 1
    for i in range(lo, hi + 1):
        if dep[i - lo] or i in stop_ids:
            continue
        for p in nodes[i].inputs:
            if p is not None and p.idx >= lo and dep[p.idx - lo]:
                dep[i - lo] = 1
                break
    if not dep[hi - lo]:
        return zeros()

    grads: dict[int, Tensor] = {hi: Tensor(np.ones_like(root.data))}
    s = _STATE
    ctx = contextlib.nullcontext() if create_graph else suspend_recording()
    s.in_backward += 1
    try:
        with ctx:
            for i in range(hi, lo - 1, -1):
                if not dep[i - lo]:
                    continue
                if i in wrt_set:
                    continue  # partials: do not expand through wrt tensors
                g = grads.pop(i, None)
                if g is None:
                    continue
                node = nodes[i]
                if node.vjp is None:
                    continue
                for p, c in zip(node.inputs, node.vjp(g)):
                    if p is None or c is None:
                        continue
                    j = p.idx
                    if j < lo or not dep[j - lo]:
                        continue
                    _accumulate(grads, j, c, create_graph)
    finally:
        s.in_backward -= 1
    return [grads.get(i, Tensor(np.zeros_like(w.data)))
            for i, w in zip(wrt_ids, wrt)]


def backward(root: Tensor, create_graph: bool = False,
             tape: Tape | None = None) -> dict[int, Tensor]:
    """Backpropagate from a scalar root to every reachable leaf.

    Returns this call's per-leaf gradients keyed by node index, and also
    accumulates them additively into ``tape.gradients`` (reset explicitly
    via ``Tape.reset_gradients``).
    """
    _check_scalar_root(root)
    if root.node is None:
        raise TapeError("backward root is not attached to a tape")
    if tape is not None and root.node.tape is not tape:
        raise TapeError("root belongs to a different tape")
    tape = root.node.tape
    nodes = tape.nodes
    hi = root.node.idx

    needed = bytearray(hi + 1)
    needed[hi] = 1
    for i in range(hi, -1, -1):
        if needed[i]:
            for p in nodes[i].inputs:
                if p is not None:
                    needed[p.idx] = 1

    grads: dict[int, Tensor] = {hi: Tensor(np.ones_like(root.data))}
    leaf_grads: dict[int, Tensor] = {}
    s = _STATE
    ctx = contextlib.nullcontext() if create_graph else suspend_recording()
    s.in_backward += 1
    try:
        with ctx:
            for i in range(hi, -1, -1):
                if not needed[i]:
                    continue
                g = grads.pop(i, None)
                if g is None:
                    continue
                node = nodes[i]
                if node.vjp is None:
                    leaf_grads[i] = g
                    continue
                for p, c in zip(node.inputs, node.vjp(g)):
                    if p is None or c is None:
                        continue
                    _accumulate(grads, p.idx, c, create_graph)
    finally:
        s.in_backward -= 1

    for i, g in leaf_grads.items():
        acc = tape.gradients.get(i)
        tape.gradients[i] = g.data.copy() if acc is None else acc + g.data
    return leaf_grads


# ---------------------------------------------------------------------------
# parameter store and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter arrays plus Adam moment state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.asarray(value)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.params)

    def scalar_count(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with bias correction, applied in place; increments the counter."""
    for name in store.params:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients to a global L2 norm of max_norm when exceeded."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))
