"""Dense tensor with a reverse-mode gradient tape.

Only the operations needed by the segmentation network are differentiable
(see :mod:`lesionseg.ops`). Every op records a :class:`Node` on its output;
``Tensor.backward`` sorts the reachable nodes topologically and visits them
once each in reverse order, accumulating gradients at fan-out.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf.

    ``max_abs`` is the largest finite magnitude in the offending array.
    """

    def __init__(self, message: str, op: str = "", max_abs: float = float("nan")):
        super().__init__(message)
        self.op = op
        self.max_abs = max_abs


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def check_finite(arr: np.ndarray, where: str) -> None:
    # a single reduction is much cheaper than a full isfinite mask
    if arr.size and not np.isfinite(arr.sum()):
        ok = np.isfinite(arr)
        if not ok.all():
            finite = np.abs(arr[ok])
            max_abs = float(finite.max()) if finite.size else float("nan")
            raise NonFiniteError(f"non-finite values produced by {where}", where, max_abs)


class Node:
    """One recorded op: its inputs and a closure mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "_output")

    def __init__(
        self,
        op: str,
        inputs: Sequence["Tensor"],
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self._output = None

    @property
    def output(self) -> "Tensor | None":
        # weak, so a graph is freed by refcounting as soon as its output is dropped
        return self._output() if self._output is not None else None

    @output.setter
    def output(self, t: "Tensor") -> None:
        self._output = weakref.ref(t)

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """N-dimensional array plus an optional gradient slot.

    Network activations use the layout ``[batch, channel, depth, height, width]``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add

        return add(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor. A scalar output defaults to grad 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        ComputeGraph.from_output(self).backward(grad)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording a node when any input requires grad."""
    check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, backward_fn)
        node.output = out
        out.node = node
    return out


class ComputeGraph:
    """Topologically ordered list of the nodes reachable from one output."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order: list[Node] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep U-Nets overflow the recursion limit otherwise
        stack: list[tuple[Node, bool]] = [(out.node, False)] if out.node is not None else []
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in reversed(node.inputs):
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def backward(self, grad: np.ndarray) -> None:
        if not self.nodes:
            return
        out = self.nodes[-1].output
        pending: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                check_finite(g, f"{node.op} backward")
                if t.node is None:
                    # leaf: accumulate into .grad
                    t.grad = g.copy() if t.grad is None else t.grad + g
                else:
                    key = id(t)
                    pending[key] = g if key not in pending else pending[key] + g
