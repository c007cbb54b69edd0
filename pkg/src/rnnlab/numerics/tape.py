"""Reverse-mode differentiation over an explicit computation tape.

Every primitive call appends one :class:`Node` to the active :class:`Tape`
(a Wengert list).  The tape can be replayed with new leaf values
(:meth:`Tape.forward`) and differentiated in strictly reverse record order
(:meth:`Tape.backward`).  Values are plain ``float64`` numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np


class TapeError(RuntimeError):
    """Misuse of a tape (wrong order of calls, foreign nodes, ...)."""


class ShapeError(TapeError, ValueError):
    """Operand dims rejected by a primitive."""


class NonFiniteError(TapeError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class IndexedGrad:
    """Gradient that is zero except at ``index``; scattered in place by the tape."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values


@dataclass(frozen=True)
class Op:
    """A primitive: ``forward(*values, **attrs)`` and its vector-Jacobian product.

    ``backward(grad, out, *values, **attrs)`` returns one gradient (or None)
    per operand, each with the operand's shape, or an :class:`IndexedGrad`.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]


class Node:
    """One value slot on a tape, either a leaf or the result of an op."""

    __slots__ = ("tape", "index", "op", "parents", "attrs", "value", "grad",
                 "grad_owned", "requires_grad", "name")

    def __init__(self, tape, index, op, parents, attrs, value, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.grad_owned = False
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or (self.op.name if self.op else "leaf")
        return f"Node({label}#{self.index}, dims={list(self.value.shape) if self.value is not None else '?'})"

    # Arithmetic sugar; the primitives live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Tape:
    """Ordered record of primitive applications.

    Leaves are created with :meth:`param` (differentiable, named),
    :meth:`input` (named, not differentiated by default) and
    :meth:`constant`.  Any node may be registered as a named output with
    :meth:`output`.

    ``check_finite`` makes every op verify its result; a failure names the op.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self.check_finite = check_finite
        self.counters: dict[str, int] = {}
        self._has_values = True

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves -------------------------------------------------------------
    def _leaf(self, value, requires_grad, name):
        arr = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), None, (), None, arr, requires_grad, name)
        self.nodes.append(node)
        if name is not None:
            if name in self.leaves:
                raise TapeError(f"leaf name {name!r} already bound on this tape")
            self.leaves[name] = node
        return node

    def param(self, name: str, value) -> Node:
        return self._leaf(value, True, name)

    def input(self, name: str, value, requires_grad: bool = False) -> Node:
        return self._leaf(value, requires_grad, name)

    def constant(self, value) -> Node:
        return self._leaf(value, False, None)

    def output(self, name: str, node: Node) -> Node:
        self._own(node)
        self.outputs[name] = node
        return node

    def bump(self, counter: str, amount: int) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + amount

    # -- recording ----------------------------------------------------------
    def _own(self, node: Node) -> None:
        if node.tape is not self:
            raise TapeError(f"{node!r} belongs to a different tape")

    def record(self, op: Op, parents: tuple[Node, ...], attrs: dict | None = None) -> Node:
        vals = []
        requires_grad = False
        for p in parents:
            if p.tape is not self:
                raise TapeError(f"op '{op.name}': operand {p!r} belongs to a different tape")
            vals.append(p.value)
            requires_grad = requires_grad or p.requires_grad
        attrs = attrs or {}
        index = len(self.nodes)
        value = self._apply(op, vals, attrs, index)
        node = Node(self, index, op, parents, attrs, value, requires_grad)
        self.nodes.append(node)
        return node

    def _apply(self, op, vals, attrs, index):
        try:
            out = op.forward(*vals, **attrs)
        except ShapeError:
            raise
        except ValueError as exc:
            dims = ", ".join(str(list(v.shape)) for v in vals)
            raise ShapeError(f"op '{op.name}' (node {index}): operand dims {dims}: {exc}") from None
        if self.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(f"op '{op.name}' (node {index}) produced a non-finite value")
        return out

    def first_non_finite(self) -> Node | None:
        """Earliest op node holding NaN/Inf, for diagnostics after an unchecked run."""
        for node in self.nodes:
            if node.op is not None and node.value is not None and not np.isfinite(node.value).all():
                return node
        return None

    # -- replay / differentiation ---------------------------------------------
    def forward(self, inputs: Mapping[str, np.ndarray] | None = None,
                outputs: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Rebind named leaves and recompute every recorded op in order.

        Counters bumped by helper functions at record time are not replayed.
        """
        for name, value in (inputs or {}).items():
            if name not in self.leaves:
                raise TapeError(f"no leaf named {name!r} on this tape")
            leaf = self.leaves[name]
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != leaf.value.shape:
                raise ShapeError(
                    f"leaf {name!r}: expected dims {list(leaf.value.shape)}, got {list(arr.shape)}")
            leaf.value = arr
        for node in self.nodes:
            node.grad = None
            if node.op is not None:
                node.value = self._apply(node.op, [p.value for p in node.parents], node.attrs, node.index)
        self._has_values = True
        names = self.outputs.keys() if outputs is None else outputs
        return {name: self.outputs[name].value for name in names}

    def release(self) -> None:
        """Drop intermediate values and gradients; leaves keep their values."""
        for node in self.nodes:
            node.grad = None
            if node.op is not None:
                node.value = None
        self._has_values = False

    def discard(self) -> None:
        """Forget every recorded node so the tape can be freed without a cycle collection.

        Nodes point at their tape and the tape lists its nodes; clearing the
        list breaks that cycle, so a finished minibatch's activations are
        released by reference counting alone.  The tape is empty afterwards.
        """
        for node in self.nodes:
            node.attrs = None
            node.parents = ()
        self.nodes = []
        self.leaves = {}
        self.outputs = {}
        self._has_values = False

    def backward(self, seeds: Mapping | Node | None = None) -> dict[str, np.ndarray]:
        """Propagate adjoints from ``seeds`` and return gradients of all named leaves.

        ``seeds`` maps output names (or nodes) to seed gradients.  A bare node
        is seeded with ones; ``None`` means the single registered output.
        Leaves that received no gradient get zeros.
        """
        if not self.nodes:
            raise TapeError("backward called on an empty tape")
        if not self._has_values:
            raise TapeError("backward called before forward: tape holds no values")
        if seeds is None:
            if len(self.outputs) != 1:
                raise TapeError("backward needs explicit seeds unless exactly one output is registered")
            seeds = {next(iter(self.outputs)): None}
        elif isinstance(seeds, Node):
            seeds = {seeds: None}

        for node in self.nodes:
            node.grad = None
            node.grad_owned = False
        start = -1
        for key, seed in seeds.items():
            node = self.outputs[key] if isinstance(key, str) else key
            self._own(node)
            g = np.ones_like(node.value) if seed is None else np.asarray(seed, dtype=np.float64)
            if g.shape != node.value.shape:
                raise ShapeError(f"seed for {node!r} has dims {list(g.shape)}")
            if node.grad is None:
                node.grad = g
            else:
                node.grad = node.grad + g
                node.grad_owned = True
            start = max(start, node.index)

        nodes = self.nodes
        for i in range(start, -1, -1):
            node = nodes[i]
            g = node.grad
            if g is None or node.op is None or not node.requires_grad:
                continue
            parents = node.parents
            pgrads = node.op.backward(g, node.value, *[p.value for p in parents], **node.attrs)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if type(pg) is IndexedGrad:
                    if not p.grad_owned:
                        p.grad = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                        p.grad_owned = True
                    p.grad[pg.index] += pg.values
                    continue
                if pg.shape != p.value.shape:
                    raise ShapeError(
                        f"op '{node.op.name}' returned gradient dims {list(pg.shape)} "
                        f"for operand dims {list(p.value.shape)}")
                if p.grad is None:
                    p.grad = pg
                elif p.grad_owned:
                    p.grad += pg
                else:
                    p.grad = p.grad + pg
                    p.grad_owned = True

        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self.leaves.items()
            if leaf.requires_grad
        }
