"""Tensor type and the reverse-mode tape."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GradientError(RuntimeError):
    """Raised when backward is called on something that cannot be differentiated."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the rule mapping d(out) to d(inputs)."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional float array with optional gradient tracking.

    Image tensors use N, C, H, W layout. Data is float32 for training;
    float64 tensors are accepted everywhere so gradient checks can run in
    double precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision, keeping requires_grad."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic (delegates to ops) -------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def abs(self) -> "Tensor":
        from . import ops
        return ops.abs(self)

    def backward(self) -> "Tape":
        return backward(self)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], rule) -> Tensor:
    """Wrap an op's output, checking finiteness and recording a node when needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite output")
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), rule)
    return out


@dataclass
class Tape:
    """Operations reachable from a loss, in recording (topological) order."""

    nodes: list[tuple[Tensor, Node]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append((t, t._node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Fill ``.grad`` on every leaf reachable from ``loss`` that requires grad.

    Gradients accumulate into existing ``.grad`` arrays, so a leaf used twice
    (or across two backward calls) receives the sum.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    if not tape.nodes:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return tape

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(ig)):
                raise NonFiniteError(f"non-finite gradient produced by {node.op}")
            if ig.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            if inp._node is None:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig
    return tape
