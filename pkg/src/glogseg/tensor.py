"""Dense float64 tensor and a reverse-mode recording tape.

Ops in :mod:`glogseg.ops` record a node on the active tape whenever at
least one input requires a gradient.  With no tape active they run
forward-only and keep nothing alive.

Typical use::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    backward(tape, loss)
    x.grad
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    """N-D float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class Node:
    index: int
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended in execution order, so inputs always precede the
    node consuming them.  A tape is bound to the thread that entered it.
    """

    nodes: list = field(default_factory=list)

    def record(self, inputs, output: Tensor, backward) -> Node:
        node = Node(len(self.nodes), tuple(inputs), output, backward)
        self.nodes.append(node)
        return node

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def backward(self, loss: Tensor, reset: bool = False) -> None:
        backward(self, loss, reset=reset)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()
        return self

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def backward(tape: Tape, loss: Tensor, reset: bool = False) -> None:
    """Propagate d(loss)/d(.) through ``tape`` into leaf ``.grad`` buffers.

    Leaf gradients accumulate across calls; pass ``reset=True`` to clear
    them first.  Intermediate tensors receive no ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if reset:
        for node in tape.nodes:
            for t in node.inputs:
                if id(t) not in produced:
                    t.grad = None

    grads: dict = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
