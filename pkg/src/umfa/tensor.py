"""Dense tensor type and the computation tape that drives reverse-mode differentiation.

Tensors wrap a numpy array. Operations in :mod:`umfa.ops` record a node on the
active :class:`Tape` whenever one of their inputs requires a gradient, and
:meth:`Tape.backward` replays those nodes in exact reverse execution order.
Without an active tape nothing is recorded, which doubles as a no-grad mode.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Storage is float32 everywhere except inside gradient checks, which run in
    float64 so that central differences are not swamped by rounding noise.
    """
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """A dense numeric array with an optional gradient slot.

    The network works on 4-D ``(n, c, h, w)`` tensors; a handful of internal
    values (Gram matrices) are 3-D. Every dimension must be at least 1.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=default_dtype())
        if arr.ndim == 0:
            raise ValueError("tensors must have at least one dimension")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt ``arr`` without copying (internal use by ops)."""
        t = cls.__new__(cls)
        if arr.ndim == 0 or any(d < 1 for d in arr.shape):
            raise ValueError(f"all tensor dimensions must be >= 1, got shape {arr.shape}")
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the ops module owns the implementations
    def __add__(self, other):
        from umfa import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from umfa import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from umfa import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from umfa import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from umfa import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from umfa import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from umfa import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from umfa import ops
        return ops.div(other, self)

    def __neg__(self):
        from umfa import ops
        return ops.mul(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """One recorded primitive: its inputs, its output and how to pull gradients back."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside the block are recorded::

        with Tape() as tape:
            loss = ops.sum(x * x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every leaf tensor that requires one.

    Leaves accumulate into an existing ``grad``; callers reset before a fresh
    pass. Intermediate gradients are dropped as soon as their node is replayed.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced:
        leaves[id(loss)] = loss

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
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
