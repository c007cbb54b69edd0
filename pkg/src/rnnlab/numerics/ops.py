"""Primitive operations recorded on a :class:`~rnnlab.numerics.tape.Tape`.

Each public function takes nodes (numbers and arrays are lifted to
constants on the operand's tape) and returns a new node.  Binary
elementwise ops accept equal dims, a scalar, or a trailing-suffix operand
such as a bias vector against a ``[batch, hidden]`` matrix; anything else is
a :class:`ShapeError` rather than silent numpy broadcasting.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tape import IndexedGrad, Node, Op, ShapeError, TapeError


def _tape_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TapeError("at least one operand must be a tape node")


def _lift(tape, x):
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _check_broadcast(name, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"op '{name}': incompatible operand dims {list(sa)} and {list(sb)}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise binary ---------------------------------------------------------

def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b


ADD = Op("add", _add_fwd, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b


SUB = Op("sub", _sub_fwd, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b


MUL = Op("mul", _mul_fwd,
         lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))


def _div_fwd(a, b, eps=0.0):
    _check_broadcast("div", a, b)
    return a / (b + eps)


def _div_bwd(g, out, a, b, eps=0.0):
    q = g / (b + eps)
    return _unbroadcast(q, a.shape), _unbroadcast(-q * out, b.shape)


DIV = Op("div", _div_fwd, _div_bwd)


def add(a, b) -> Node:
    t = _tape_of(a, b)
    return t.record(ADD, (_lift(t, a), _lift(t, b)))


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    return t.record(SUB, (_lift(t, a), _lift(t, b)))


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    return t.record(MUL, (_lift(t, a), _lift(t, b)))


def div(a, b, eps: float = 0.0) -> Node:
    """``a / (b + eps)``."""
    t = _tape_of(a, b)
    return t.record(DIV, (_lift(t, a), _lift(t, b)), {"eps": eps} if eps else None)


def _muladd_fwd(a, b, c, d):
    if not (a.shape == b.shape == c.shape == d.shape):
        raise ShapeError(
            f"op 'muladd': operand dims {[list(v.shape) for v in (a, b, c, d)]} must agree")
    return a * b + c * d


MULADD = Op("muladd", _muladd_fwd, lambda g, out, a, b, c, d: (g * b, g * a, g * d, g * c))


def muladd(a: Node, b: Node, c: Node, d: Node) -> Node:
    """Fused ``a*b + c*d`` over same-shaped operands."""
    t = _tape_of(a, b, c, d)
    return t.record(MULADD, tuple(_lift(t, x) for x in (a, b, c, d)))


NEG = Op("neg", lambda a: -a, lambda g, out, a: (-g,))


def neg(a: Node) -> Node:
    return a.tape.record(NEG, (a,))


# -- matmul -------------------------------------------------------------------

def _matmul_fwd(a, b):
    if b.ndim != 2 or a.ndim not in (1, 2, 3) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': operand dims {list(a.shape)} and {list(b.shape)}")
    return a @ b


def _matmul_bwd(g, out, a, b):
    ga = g @ b.T
    if a.ndim == 1:
        gb = np.outer(a, g)
    else:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


MATMUL = Op("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b) -> Node:
    """``a @ b`` with ``b`` a matrix; ``a`` may carry leading batch/time axes."""
    t = _tape_of(a, b)
    return t.record(MATMUL, (_lift(t, a), _lift(t, b)))


# -- elementwise unary --------------------------------------------------------

TANH = Op("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
SIGMOID = Op("sigmoid", expit, lambda g, out, a: (g * out * (1.0 - out),))
EXP = Op("exp", np.exp, lambda g, out, a: (g * out,))
RELU = Op("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0.0),))
SOFTPLUS = Op("softplus", lambda a: np.logaddexp(0.0, a), lambda g, out, a: (g * expit(a),))
LOG = Op("log", np.log, lambda g, out, a: (g / a,))


def _exp_clamped_fwd(a, limit):
    return np.exp(np.minimum(a, limit))


def _exp_clamped_bwd(g, out, a, limit):
    return (g * out * (a <= limit),)


EXP_CLAMPED = Op("exp_clamped", _exp_clamped_fwd, _exp_clamped_bwd)


def tanh(a: Node) -> Node:
    return a.tape.record(TANH, (a,))


def sigmoid(a: Node) -> Node:
    return a.tape.record(SIGMOID, (a,))


def exp(a: Node) -> Node:
    return a.tape.record(EXP, (a,))


def relu(a: Node) -> Node:
    return a.tape.record(RELU, (a,))


def softplus(a: Node) -> Node:
    return a.tape.record(SOFTPLUS, (a,))


def log(a: Node) -> Node:
    return a.tape.record(LOG, (a,))


def _cap_fwd(a, limit):
    return np.minimum(a, limit)


CAP = Op("cap", _cap_fwd, lambda g, out, a, limit: (g * (a <= limit),))


def cap(a: Node, limit: float) -> Node:
    """``min(a, limit)`` elementwise."""
    return a.tape.record(CAP, (a,), {"limit": limit})


def exp_clamped(a: Node, limit: float, counter: str = "exp_clamp") -> Node:
    """``exp(min(a, limit))``; entries above ``limit`` get zero gradient.

    The number of clamped entries is added to ``tape.counters[counter]``.
    """
    hits = int(np.count_nonzero(a.value > limit))
    if hits:
        a.tape.bump(counter, hits)
    return a.tape.record(EXP_CLAMPED, (a,), {"limit": limit})


# -- structural ----------------------------------------------------------------

def _slice_bwd(g, out, a, start, stop):
    return (IndexedGrad((Ellipsis, slice(start, stop)), g),)


SLICE = Op("slice", lambda a, start, stop: a[..., start:stop], _slice_bwd)


def slice_last(a: Node, start: int, stop: int) -> Node:
    """Columns ``start:stop`` of the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"op 'slice': range {start}:{stop} outside last dim {a.shape[-1]}")
    return a.tape.record(SLICE, (a,), {"start": start, "stop": stop})


def _rows_bwd(g, out, a, start, stop):
    return (IndexedGrad(slice(start, stop), g),)


ROWS = Op("rows", lambda a, start, stop: a[start:stop], _rows_bwd)


def rows(a: Node, start: int, stop: int) -> Node:
    """Rows ``start:stop`` of the first axis."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"op 'rows': range {start}:{stop} outside first dim {a.shape[0]}")
    return a.tape.record(ROWS, (a,), {"start": start, "stop": stop})


def _concat_fwd(*vals, axis):
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"op 'concat': operand dims {[list(v.shape) for v in vals]}: {exc}") from None


def _concat_bwd(g, out, *vals, axis):
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


CONCAT = Op("concat", _concat_fwd, _concat_bwd)


def concat(parts, axis: int = -1) -> Node:
    t = _tape_of(*parts)
    return t.record(CONCAT, tuple(_lift(t, p) for p in parts), {"axis": axis})


def _step_bwd(g, out, a, t):
    return (IndexedGrad((slice(None), t), g),)


STEP = Op("step", lambda a, t: a[:, t], _step_bwd)


def step(a: Node, t: int) -> Node:
    """Time slice ``a[:, t]`` of a ``[batch, time, ...]`` node."""
    if a.value.ndim < 2 or not 0 <= t < a.shape[1]:
        raise ShapeError(f"op 'step': index {t} outside dims {list(a.shape)}")
    return a.tape.record(STEP, (a,), {"t": t})


def _stack_bwd(g, out, *vals):
    return tuple(g[:, i] for i in range(len(vals)))


def _stack_fwd(*vals):
    try:
        return np.stack(vals, axis=1)
    except ValueError as exc:
        raise ShapeError(f"op 'stack': {exc}") from None


STACK = Op("stack", _stack_fwd, _stack_bwd)


def stack_time(nodes) -> Node:
    """Stack ``[batch, ...]`` nodes into ``[batch, time, ...]``."""
    t = _tape_of(*nodes)
    return t.record(STACK, tuple(nodes))


def _gather_bwd(g, out, table, idx):
    full = np.zeros_like(table)
    np.add.at(full, idx, g)
    return (full,)


GATHER = Op("gather", lambda table, idx: table[idx], _gather_bwd)


def gather_rows(table: Node, idx: np.ndarray) -> Node:
    """Embedding lookup: ``table[idx]`` for an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"op 'gather': index outside table rows {table.shape[0]}")
    return table.tape.record(GATHER, (table,), {"idx": idx})


# -- reductions and losses -------------------------------------------------------

SUM = Op("sum", lambda a: np.asarray(a.sum()), lambda g, out, a: (np.full_like(a, g),))


def sum_all(a: Node) -> Node:
    return a.tape.record(SUM, (a,))


def _masked_norm(mask):
    total = float(mask.sum())
    return total if total > 0 else 1.0


def _mse_fwd(pred, target, mask):
    if pred.shape != target.shape or pred.shape[:mask.ndim] != mask.shape:
        raise ShapeError(
            f"op 'mse': pred {list(pred.shape)}, target {list(target.shape)}, mask {list(mask.shape)}")
    m = mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim))
    diff = (pred - target) * m
    return np.asarray((diff * diff).sum() / (_masked_norm(mask) * (pred.size // mask.size)))


def _mse_bwd(g, out, pred, target, mask):
    m = mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim))
    scale = 2.0 * g / (_masked_norm(mask) * (pred.size // mask.size))
    return (scale * (pred - target) * m,)


MSE = Op("mse", _mse_fwd, _mse_bwd)


def mse(pred: Node, target: np.ndarray, mask: np.ndarray) -> Node:
    """Mean squared error over positions where ``mask`` is 1."""
    return pred.tape.record(MSE, (pred,), {"target": np.asarray(target, np.float64),
                                            "mask": np.asarray(mask, np.float64)})


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _xent_fwd(logits, target, mask):
    if logits.shape[:-1] != target.shape or target.shape != mask.shape:
        raise ShapeError(
            f"op 'softmax_xent': logits {list(logits.shape)}, target {list(target.shape)}, "
            f"mask {list(mask.shape)}")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    return np.asarray(-(picked * mask).sum() / _masked_norm(mask))


def _xent_bwd(g, out, logits, target, mask):
    p = np.exp(log_softmax(logits))
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    return ((g / _masked_norm(mask)) * (p - onehot) * mask[..., None],)


XENT = Op("softmax_xent", _xent_fwd, _xent_bwd)


def softmax_xent(logits: Node, target: np.ndarray, mask: np.ndarray) -> Node:
    """Mean softmax cross-entropy (nats) over masked positions; ``target`` holds class ids."""
    return logits.tape.record(XENT, (logits,), {"target": np.asarray(target, np.int64),
                                                "mask": np.asarray(mask, np.float64)})


def _bce_fwd(logits, target, mask):
    if logits.shape != target.shape or logits.shape[:mask.ndim] != mask.shape:
        raise ShapeError(
            f"op 'bce': logits {list(logits.shape)}, target {list(target.shape)}, mask {list(mask.shape)}")
    m = mask.reshape(mask.shape + (1,) * (logits.ndim - mask.ndim))
    # log(1 + e^x) - t*x is the stable form of -[t log s + (1-t) log(1-s)]
    per = np.logaddexp(0.0, logits) - target * logits
    return np.asarray((per * m).sum() / (_masked_norm(mask) * (logits.size // mask.size)))


def _bce_bwd(g, out, logits, target, mask):
    m = mask.reshape(mask.shape + (1,) * (logits.ndim - mask.ndim))
    scale = g / (_masked_norm(mask) * (logits.size // mask.size))
    return (scale * (expit(logits) - target) * m,)


BCE = Op("bce", _bce_fwd, _bce_bwd)


def binary_xent(logits: Node, target: np.ndarray, mask: np.ndarray) -> Node:
    """Mean sigmoid cross-entropy of logits against {0,1} targets over masked positions."""
    return logits.tape.record(BCE, (logits,), {"target": np.asarray(target, np.float64),
                                               "mask": np.asarray(mask, np.float64)})
