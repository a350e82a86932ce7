"""
Minimal reverse-mode automatic differentiation.

A `Tape` records every operation as a node in an append-only list. Node ids
grow strictly and every input of a node has a smaller id, so the reverse
sweep simply walks the list backwards. Values are float64 numpy arrays (a
scalar is a 0-d array), which lets one tape record a whole batch at once.

Supported operations: add, sub, mul, div, neg, exp, log, tanh, square,
sum-reduce, dot and affine (matrix-vector + bias). Everything else is
composed from these. `stop_gradient` forwards a value unchanged while cutting
the adjoint flow to its ancestors.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pathflow.core.errors import NumericError, UsageError


# A partial is either an array of elementwise local derivatives (broadcastable
# to the node value) or a callable mapping the node adjoint to the input adjoint.
Partial = np.ndarray | float | Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, slots=True)
class Node:
    """One recorded operation."""
    kind: str
    inputs: tuple[int, ...]
    partials: tuple[Partial, ...]
    shape: tuple[int, ...]
    requires_grad: bool


@dataclass(slots=True)
class AdjointVector:
    """Dense node-id -> adjoint map for one scalar output."""
    output_id: int
    values: list[np.ndarray | None] = field(default_factory=list)

    def __getitem__(self, node_id: int) -> np.ndarray | float:
        if node_id >= len(self.values) or self.values[node_id] is None:
            return 0.0
        return self.values[node_id]


class Var:
    """Handle to a node on a tape: tape, node id and value."""

    __slots__ = ("tape", "id", "value", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis: int | None = None) -> "Var":
        return sum_reduce(self, axis)


class Tape:
    """
    Append-only record of operations for reverse-mode differentiation.

    A tape is single-threaded. Batch parallelism uses one tape per worker.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, requires_grad: bool = True) -> Var:
        """Record a leaf (an input we may differentiate with respect to)."""
        return self.record("leaf", [], value, [], requires_grad=requires_grad)

    def constant(self, value) -> Var:
        """Record a leaf that never receives an adjoint."""
        return self.record("const", [], value, [], requires_grad=False)

    def record(self, kind: str, inputs: Sequence[Var], value, partials: Sequence[Partial],
               requires_grad: bool | None = None) -> Var:
        """
        Append one node to the tape.

        Args:
            kind: Operation name, kept for inspection
            inputs: Input Vars, all on this tape
            value: Output value (converted to float64)
            partials: One local partial per input
            requires_grad: Override; by default true when any input requires it

        Returns:
            Var: Handle to the new node

        Raises:
            UsageError: Cross-tape input or partials/inputs length mismatch
            NumericError: Non-finite value
        """
        if len(partials) != len(inputs):
            raise UsageError(f"{kind}: {len(inputs)} inputs but {len(partials)} partials")
        for v in inputs:
            if v.tape is not self:
                raise UsageError(f"{kind}: input node {v.id} lives on another tape")

        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value recorded by '{kind}'")

        if requires_grad is None:
            requires_grad = any(v.requires_grad for v in inputs)

        node_id = len(self.nodes)
        self.nodes.append(Node(kind, tuple(v.id for v in inputs), tuple(partials),
                               value.shape, requires_grad))
        return Var(self, node_id, value, requires_grad)

    def adjoints(self, output: Var) -> AdjointVector:
        """Full adjoint vector of a scalar output (every node up to the output)."""
        return AdjointVector(output.id, self._sweep(output, keep=None))

    def backward(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """
        Exact adjoints of a scalar output with respect to the given Vars.

        The sweep visits every node from the output down to id 0 once and drops
        adjoints as soon as they have been propagated, unless requested.

        Raises:
            UsageError: Output or wrt not on this tape, or output not scalar
        """
        for v in wrt:
            if v.tape is not self:
                raise UsageError(f"node {v.id} is not on the output's tape")
        adj = self._sweep(output, keep={v.id for v in wrt})
        return [
            np.array(adj[v.id]) if v.id <= output.id and adj[v.id] is not None
            else np.zeros_like(v.value)
            for v in wrt
        ]

    def _sweep(self, output: Var, keep: set[int] | None) -> list[np.ndarray | None]:
        if output.tape is not self:
            raise UsageError(f"node {output.id} is not on this tape")
        if output.value.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.value.shape}")

        adj: list[np.ndarray | None] = [None] * (output.id + 1)
        adj[output.id] = np.ones_like(output.value)

        for i in range(output.id, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or not node.requires_grad or not node.inputs:
                continue
            for input_id, partial in zip(node.inputs, node.partials):
                source = self.nodes[input_id]
                if not source.requires_grad:
                    continue
                contribution = partial(g) if callable(partial) else g * partial
                contribution = _unbroadcast(contribution, source.shape)
                adj[input_id] = contribution if adj[input_id] is None else adj[input_id] + contribution
            if keep is not None and i not in keep:
                adj[i] = None
        return adj


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast adjoint back down to the input's shape."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(kind: str, operands: Sequence, value, partials: Sequence[Partial]):
    """Record an op whose operands may mix Vars and plain constants."""
    inputs, kept = [], []
    for operand, partial in zip(operands, partials):
        if isinstance(operand, Var):
            inputs.append(operand)
            kept.append(partial)
    if not inputs:
        return np.asarray(value, dtype=np.float64)
    tape = inputs[0].tape
    return tape.record(kind, inputs, value, kept)


def add(a, b):
    return _record("add", (a, b), _value(a) + _value(b), (1.0, 1.0))


def sub(a, b):
    return _record("sub", (a, b), _value(a) - _value(b), (1.0, -1.0))


def mul(a, b):
    va, vb = _value(a), _value(b)
    return _record("mul", (a, b), va * vb, (vb, va))


def div(a, b):
    va, vb = _value(a), _value(b)
    inv = 1.0 / vb
    return _record("div", (a, b), va * inv, (inv, -va * inv * inv))


def neg(a):
    return _record("neg", (a,), -_value(a), (-1.0,))


def exp(a):
    out = np.exp(_value(a))
    return _record("exp", (a,), out, (out,))


def log(a):
    va = _value(a)
    if np.any(va <= 0):
        raise NumericError("log of a non-positive value")
    return _record("log", (a,), np.log(va), (1.0 / va,))


def tanh(a):
    out = np.tanh(_value(a))
    return _record("tanh", (a,), out, (1.0 - out * out,))


def square(a):
    va = _value(a)
    return _record("square", (a,), va * va, (2.0 * va,))


def sum_reduce(a, axis: int | None = None):
    va = _value(a)
    shape = va.shape

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _record("sum", (a,), va.sum(axis=axis), (expand,))


def dot(a, b):
    """Matrix product a @ b for 1-d and 2-d operands."""
    va, vb = _value(a), _value(b)
    if va.ndim not in (1, 2) or vb.ndim not in (1, 2):
        raise UsageError(f"dot supports 1-d/2-d operands, got {va.shape} @ {vb.shape}")
    out = va @ vb

    def grad_a(g):
        if vb.ndim == 1:
            return np.multiply.outer(g, vb) if va.ndim == 2 else g * vb
        return g @ vb.T

    def grad_b(g):
        if va.ndim == 1:
            return np.multiply.outer(va, g) if vb.ndim == 2 else g * va
        return va.T @ g

    return _record("dot", (a, b), out, (grad_a, grad_b))


def affine(x, weight, bias):
    """x @ weight.T + bias, with x of shape (N, d_in) or (d_in,)."""
    vx, vw, vb = _value(x), _value(weight), _value(bias)
    out = vx @ vw.T + vb

    def grad_x(g):
        return g @ vw

    def grad_w(g):
        return g.T @ vx if vx.ndim == 2 else np.multiply.outer(g, vx)

    def grad_b(g):
        return g.sum(axis=0) if g.ndim == 2 else g

    return _record("affine", (x, weight, bias), out, (grad_x, grad_w, grad_b))


def stop_gradient(v):
    """Forward v's value unchanged; the backward sweep stops here."""
    if not isinstance(v, Var):
        return _value(v)
    return v.tape.record("stop_gradient", [v], v.value, [0.0], requires_grad=False)
