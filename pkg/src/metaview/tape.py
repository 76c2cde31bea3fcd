"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation as a :class:`Node` in creation order,
so creation order is already a topological order and :meth:`Tape.backward`
only has to walk the node list in reverse.  Gradients accumulate with ``+=``
which is what makes parameter sharing across unrolled RNN steps work.

Ops are plain functions taking nodes (``matmul(a, b)``, ``tanh(a)``, ...);
every node knows the tape it lives on.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray
Vjp = Callable[[Array], Sequence["Array | None"]]


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "tape", "name", "_vjp")

    def __init__(self, tape: "Tape", op: str, value: Array, inputs=(), vjp: Vjp | None = None,
                 name: str | None = None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad: Array | None = None
        self.name = name
        self._vjp = vjp
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.id} {self.op}{label} shape={self.shape})"


class Tape:
    """Append-only record of nodes.  Single-threaded by design."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable input.  Named leaves show up in :meth:`backward`'s map."""
        return Node(self, "leaf", np.array(value, dtype=np.float64), name=name)

    def constant(self, value) -> Node:
        return Node(self, "const", np.array(value, dtype=np.float64))

    def params(self, theta: dict[str, Array]) -> dict[str, Node]:
        return {name: self.leaf(v, name) for name, v in theta.items()}

    def backward(self, loss: Node) -> dict[str, Array]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Returns gradients of the named leaves, zero-filled for named leaves the
        loss does not depend on.  Running it twice gives identical results.
        """
        if loss.tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            for inp, gi in zip(node.inputs, node._vjp(g)):
                if gi is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64).reshape(inp.shape)
                else:
                    inp.grad += gi
        out = {}
        for node in self.nodes:
            if node.op == "leaf" and node.name is not None:
                out[node.name] = (node.grad.copy() if node.grad is not None
                                  else np.zeros_like(node.value))
        return out


def _same_shape(a: Node, b: Node, opname: str) -> None:
    if a.tape is not b.tape:
        raise ContractError(f"{opname}: operands live on different tapes")
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    """Matrix product; ``a`` may also be a vector (treated as a row)."""
    if a.tape is not b.tape:
        raise ContractError("matmul: operands live on different tapes")
    if b.value.ndim != 2 or a.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return Node(a.tape, "matmul", av @ bv, (a, b), vjp)


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return Node(a.tape, "add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return Node(a.tape, "sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Node(a.tape, "mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.tape, "scale", a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return Node(a.tape, "tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Node) -> Node:
    mask = a.value > 0.0  # subgradient 0 at exactly 0
    return Node(a.tape, "relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return Node(a.tape, "exp", y, (a,), lambda g: (g * y,))


_UNARY = {"tanh": tanh, "relu": relu, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a: Node, kind: str, b: Node | None = None, c: float | None = None) -> Node:
    """Dispatch form: ``kind`` in add/sub/mul (need ``b``), tanh/relu/exp, scale (needs ``c``)."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"elementwise {kind} needs a second operand")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        if c is None:
            raise ContractError("elementwise scale needs a constant c")
        return scale(a, c)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add_bias(a: Node, b: Node) -> Node:
    """``a + b`` with the vector ``b`` broadcast over the rows of ``a``."""
    if b.value.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {a.shape}")
    lead = tuple(range(a.value.ndim - 1))
    return Node(a.tape, "add_bias", a.value + b.value, (a, b),
                lambda g: (g, g.sum(axis=lead) if lead else g))


def concat(a: Node, b: Node) -> Node:
    if a.tape is not b.tape:
        raise ContractError("concat: operands live on different tapes")
    if a.value.ndim != b.value.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading dims differ, {a.shape} vs {b.shape}")
    p = a.shape[-1]
    return Node(a.tape, "concat", np.concatenate([a.value, b.value], axis=-1), (a, b),
                lambda g: (g[..., :p], g[..., p:]))


def log_softmax(z: Node) -> Node:
    """Stable log-softmax along the last axis."""
    if z.value.ndim == 0 or z.shape[-1] < 1:
        raise DimensionError(f"log_softmax: need at least one entry, got {z.shape}")
    shifted = z.value - z.value.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Node(z.tape, "log_softmax", y, (z,), vjp)


def gather_row(table: Node, index: int) -> Node:
    """Row lookup, equivalent to ``onehot(index) @ table``."""
    if table.value.ndim != 2:
        raise DimensionError(f"gather_row: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    index = int(index)
    if not 0 <= index < n:
        raise IndexError(f"gather_row: index {index} outside [0, {n})")

    def vjp(g):
        out = np.zeros(table.shape)
        out[index] = g
        return (out,)

    return Node(table.tape, "gather_row", table.value[index].copy(), (table,), vjp)


def gather_rows(table: Node, indices) -> Node:
    """Batched :func:`gather_row`; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= n)):
        raise IndexError(f"gather_rows: indices {idx.tolist()} outside [0, {n})")

    def vjp(g):
        out = np.zeros(table.shape)
        np.add.at(out, idx, g)
        return (out,)

    return Node(table.tape, "gather_rows", table.value[idx], (table,), vjp)


def pick(a: Node, indices) -> Node:
    """Select one entry per row: ``out[i] = a[i, indices[i]]`` (or ``a[k]`` for a vector)."""
    if a.value.ndim == 1:
        k = int(indices)
        if not 0 <= k < a.shape[0]:
            raise IndexError(f"pick: index {k} outside [0, {a.shape[0]})")

        def vjp1(g):
            out = np.zeros(a.shape)
            out[k] = g
            return (out,)

        return Node(a.tape, "pick", a.value[k].copy(), (a,), vjp1)
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.shape[0])
    if idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: need {a.shape[0]} indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"pick: indices outside [0, {a.shape[1]})")

    def vjp(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return (out,)

    return Node(a.tape, "pick", a.value[rows, idx], (a,), vjp)


def row(a: Node, i: int) -> Node:
    """``a[i]`` along the first axis."""
    i = int(i)
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"row: index {i} outside [0, {a.shape[0]})")

    def vjp(g):
        out = np.zeros(a.shape)
        out[i] = g
        return (out,)

    return Node(a.tape, "row", a.value[i].copy(), (a,), vjp)


def total(a: Node) -> Node:
    """Sum of all entries, as a scalar node."""
    shape = a.shape
    return Node(a.tape, "sum", np.array(a.value.sum()), (a,),
                lambda g: (np.broadcast_to(g, shape),))


def sum_last(a: Node) -> Node:
    """Sum over the last axis."""
    shape = a.shape
    return Node(a.tape, "sum_last", a.value.sum(axis=-1), (a,),
                lambda g: (np.broadcast_to(g[..., None], shape),))


def add_all(nodes: Sequence[Node]) -> Node:
    """Sum of equally-shaped nodes in a single tape node."""
    if not nodes:
        raise ContractError("add_all of an empty list")
    first = nodes[0]
    for n in nodes[1:]:
        _same_shape(first, n, "add_all")
    value = np.sum([n.value for n in nodes], axis=0)
    k = len(nodes)
    return Node(first.tape, "add_all", value, tuple(nodes), lambda g: (g,) * k)


def stop_gradient(a: Node) -> Node:
    """Materialize ``a``'s value as a fresh constant: no gradient flows back through it."""
    return a.tape.constant(a.value.copy())
