"""Reverse-mode automatic differentiation over tensors.

Every differentiable operation funnels through `forward_record`, which builds
a `Node` carrying the output value, links to its parents, and one local
backward rule per parent (a closure mapping the output gradient to that
parent's gradient contribution).  Nodes are numbered in creation order, so
execution order doubles as a topological order: `backward` walks the nodes
reachable from the loss in reverse creation order, which visits every node
after all of its consumers.

Gradients accumulate across `backward` calls (the per-step optimizer contract
expects an explicit `zero_grads`).  A `Tape` can be opened around a forward
pass to inspect the exact sequence of recorded operations; it is bookkeeping
only and does not change how gradients flow.

`finite_difference_grad` is the independent oracle used by the gradient-check
suite: a central-difference estimate evaluated coordinate by coordinate,
meant to be run under `precision("float64")`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .tensor import DomainError, ShapeError, Tensor, elementwise as _ew

__all__ = [
    "Node",
    "Tape",
    "constant",
    "parameter",
    "forward_record",
    "backward",
    "zero_grads",
    "finite_difference_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "matmul",
    "concat",
    "reshape",
    "reduce_sum",
    "reduce_mean",
]

_seq_counter = itertools.count()
_active_tapes: list["Tape"] = []


class Node:
    """A tensor value plus gradient slot and parent links in the graph."""

    __slots__ = ("_value", "_grad", "parents", "requires_grad", "name", "_seq")

    def __init__(self, value: Tensor, parents=(), requires_grad=False, name=""):
        self._value = value
        self._grad = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.name = name
        self._seq = next(_seq_counter)

    @property
    def value(self) -> Tensor:
        return self._value

    @value.setter
    def value(self, new: Tensor):
        # Only optimizers reassign values, and only between steps; the graph
        # itself never mutates a node's value.
        if not isinstance(new, Tensor):
            raise TypeError("node value must be a Tensor")
        if new.shape != self._value.shape:
            raise ShapeError(f"parameter update changes shape {self._value.shape} -> {new.shape}")
        self._value = new

    @property
    def grad(self):
        """Accumulated gradient as a Tensor; zeros if never written."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            return Tensor(np.zeros(self._value.shape, dtype=self._value.dtype))
        return Tensor(self._grad)

    def grad_array(self):
        """Raw gradient buffer (may be None when untouched)."""
        return self._grad

    def _accumulate(self, arr: np.ndarray):
        if arr.shape != self._value.shape:
            raise ShapeError(
                f"gradient shape {arr.shape} does not match value shape {self._value.shape}"
                + (f" for {self.name}" if self.name else "")
            )
        if self._grad is None:
            self._grad = arr.astype(self._value.dtype, copy=True)
        else:
            self._grad += arr

    @property
    def shape(self):
        return self._value.shape

    @property
    def dtype(self):
        return self._value.dtype

    def item(self) -> float:
        return self._value.item()

    # Operator sugar mirroring the tensor layer.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of the differentiable operations run while it is active.

    Usable as a context manager; nested tapes each see the ops recorded in
    their scope.
    """

    def __init__(self):
        self.records: list[Node] = []

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False


def constant(value, name="") -> Node:
    """A leaf that does not require gradients (inputs, targets)."""
    if not isinstance(value, Tensor):
        value = Tensor(value)
    return Node(value, requires_grad=False, name=name)


def parameter(value, name="") -> Node:
    """A trainable leaf."""
    if not isinstance(value, Tensor):
        value = Tensor(value)
    return Node(value, requires_grad=True, name=name)


def forward_record(op_name: str, value: Tensor, parents: Sequence[tuple[Node, Callable]]) -> Node:
    """Create the output node of a differentiable op and append it to active tapes.

    `parents` pairs each input node with its local backward rule; rules of
    inputs that do not require gradients are dropped, so a node built purely
    from constants has an empty parent set.
    """
    kept = tuple((p, rule) for p, rule in parents if p.requires_grad)
    node = Node(value, parents=kept, requires_grad=bool(kept), name=op_name)
    for tape in _active_tapes:
        tape.records.append(node)
    return node


def backward(root: Node) -> None:
    """Populate gradients of everything reachable from a scalar root.

    The root receives gradient 1; contributions accumulate into `.grad`, so
    call `zero_grads` between optimizer steps.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    reachable = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable.add(id(node))
        stack.extend(p for p, _ in node.parents if id(p) not in reachable)
    if not root.requires_grad and not root.parents:
        # Loss of constants only: nothing to do beyond seeding the root.
        root._grad = np.ones(root.shape, dtype=root.dtype)
        return
    nodes = [root]
    seen = {id(root)}
    stack = [root]
    while stack:
        node = stack.pop()
        for p, _ in node.parents:
            if id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    root._accumulate(np.ones(root.shape, dtype=root.dtype))
    for node in nodes:
        g = node._grad
        if g is None:
            continue
        for p, rule in node.parents:
            p._accumulate(rule(g))


def zero_grads(nodes) -> None:
    """Reset gradients; idempotent and a no-op on an empty set."""
    for node in nodes:
        node._grad = None


def finite_difference_grad(f, x: Tensor, h: float = 1e-5, indices=None) -> Tensor:
    """Central-difference gradient estimate of a scalar-valued f at x.

    Perturbs one coordinate at a time: (f(x + h e_i) - f(x - h e_i)) / 2h.
    Requires float64 input so the quotient has headroom; `indices` restricts
    the estimate to a subset of flat coordinates (everything else stays 0),
    which keeps whole-network checks affordable.
    """
    if x.dtype != np.float64:
        raise ValueError("finite differences need float64 inputs; wrap in precision('float64')")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        bumped = flat.copy()
        bumped[i] += h
        f_plus = float(f(Tensor(bumped.reshape(x.shape), dtype=np.float64)))
        bumped[i] -= 2 * h
        f_minus = float(f(Tensor(bumped.reshape(x.shape), dtype=np.float64)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DomainError(f"non-finite function value near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad.reshape(x.shape), dtype=np.float64)


# ---------------------------------------------------------------------------
# Differentiable primitives.  Each returns a recorded node; scalar operands
# are folded into the kernel rather than wrapped as nodes.
# ---------------------------------------------------------------------------


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def add(a: Node, b) -> Node:
    a = _as_node(a)
    if isinstance(b, (int, float)):
        return forward_record("add", _ew("add", a.value, float(b)), [(a, lambda g: g)])
    b = _as_node(b)
    value = _ew("add", a.value, b.value)
    return forward_record("add", value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Node, b) -> Node:
    a = _as_node(a)
    if isinstance(b, (int, float)):
        return forward_record("sub", _ew("sub", a.value, float(b)), [(a, lambda g: g)])
    b = _as_node(b)
    value = _ew("sub", a.value, b.value)
    return forward_record("sub", value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Node, b) -> Node:
    a = _as_node(a)
    if isinstance(b, (int, float)):
        s = float(b)
        return forward_record("mul", _ew("mul", a.value, s), [(a, lambda g: g * s)])
    b = _as_node(b)
    value = _ew("mul", a.value, b.value)
    av, bv = a.value.data, b.value.data
    return forward_record("mul", value, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def div(a: Node, b) -> Node:
    a = _as_node(a)
    if isinstance(b, (int, float)):
        if b == 0:
            raise DomainError("div: zero divisor")
        inv = 1.0 / float(b)
        return forward_record("div", _ew("mul", a.value, inv), [(a, lambda g: g * inv)])
    b = _as_node(b)
    value = _ew("div", a.value, b.value)
    av, bv = a.value.data, b.value.data
    return forward_record(
        "div",
        value,
        [(a, lambda g: g / bv), (b, lambda g: -g * av / (bv * bv))],
    )


def neg(a: Node) -> Node:
    return mul(a, -1.0)


def exp(a: Node) -> Node:
    a = _as_node(a)
    value = _ew("exp", a.value)
    out = value.data
    return forward_record("exp", value, [(a, lambda g: g * out)])


def log(a: Node) -> Node:
    a = _as_node(a)
    value = _ew("log", a.value)
    av = a.value.data
    return forward_record("log", value, [(a, lambda g: g / av)])


def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    from .tensor import matmul as _mm

    value = _mm(a.value, b.value)
    av, bv = a.value.data, b.value.data
    return forward_record(
        "matmul",
        value,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
    )


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = [_as_node(n) for n in nodes]
    from .tensor import concat as _cat

    value = _cat([n.value for n in nodes], axis)
    parents = []
    offset = 0
    for n in nodes:
        width = n.shape[axis]
        lo, hi = offset, offset + width

        def rule(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((n, rule))
        offset = hi
    return forward_record("concat", value, parents)


def reshape(a: Node, shape) -> Node:
    a = _as_node(a)
    old_shape = a.shape
    value = a.value.reshape(shape)
    return forward_record("reshape", value, [(a, lambda g: g.reshape(old_shape))])


def reduce_sum(a: Node, axis=None) -> Node:
    a = _as_node(a)
    shape, dtype = a.shape, a.dtype
    if axis is None:
        value = Tensor(np.asarray(a.value.data.sum(), dtype=dtype))
        return forward_record("sum", value, [(a, lambda g: np.full(shape, g, dtype=dtype))])
    if not (0 <= axis < len(shape)):
        raise ShapeError(f"reduce axis {axis} out of range for rank {len(shape)}")
    value = Tensor(a.value.data.sum(axis=axis), dtype=dtype)
    return forward_record(
        "sum",
        value,
        [(a, lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).astype(dtype))],
    )


def reduce_mean(a: Node, axis=None) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return div(reduce_sum(a, axis), float(n))
