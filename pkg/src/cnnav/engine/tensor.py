"""Dense tensors and the reverse-mode tape.

A :class:`Tape` is opened as a context manager around one forward pass. Every
primitive that sees an operand with ``requires_grad`` appends a node holding
its operands, its result and a closure mapping the output gradient to operand
gradients. Nodes are appended in creation order, which is already a valid
topological order, so :func:`backward` simply walks the list in reverse.

Tape state and the working float precision are thread-local so that model
replicas can train on separate threads.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "backward",
    "precision",
    "shadow_mode",
    "float_dtype",
    "current_tape",
    "ravel_index",
    "unravel_index",
    "TapeError",
    "ShapeError",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (stale tape, non-scalar root, ...)."""


_state = threading.local()


def float_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the float type used for newly created tensors."""
    prev = float_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def shadow_mode() -> "contextmanager":
    """64-bit evaluation, used by finite-difference checks."""
    return precision(np.float64)


def current_tape() -> Optional["Tape"]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array that can take part in differentiation.

    ``data`` is a C-contiguous numpy array of float32 (or float64 in shadow
    mode). Integer or python inputs are converted to the active float type;
    float arrays keep their dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(float_dtype())
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; the real implementations live in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(_as_tensor(other, self.dtype), -1.0))

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of the operations of one forward pass.

    Use as a context manager; nested tapes shadow the outer one.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been differentiated")
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def backward(self, root: Tensor) -> None:
        backward(self, root)

    def first_non_finite(self) -> Optional[str]:
        """Describe the earliest recorded tensor holding NaN/Inf, if any."""
        for node in self.nodes:
            for t in node.inputs:
                if t.is_leaf and not np.all(np.isfinite(t.data)):
                    return f"input {t.name or 'leaf'} of {node.op}#{node.output.node_id}"
            if not np.all(np.isfinite(node.output.data)):
                return f"output of {node.op}#{node.output.node_id}"
        return None


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if root.data.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call; run a new forward pass")
    if root.node_id is None or root.node_id >= len(tape.nodes) or tape.nodes[root.node_id].output is not root:
        raise TapeError("root tensor was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def ravel_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major flat offset of ``index`` inside ``shape``."""
    if len(shape) != len(index):
        raise ShapeError("index rank does not match shape rank")
    flat = 0
    for dim, i in zip(shape, index):
        if not 0 <= i < dim:
            raise IndexError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
        flat = flat * dim + i
    return flat


def unravel_index(shape: Sequence[int], flat: int) -> tuple:
    total = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
    if not 0 <= flat < total:
        raise IndexError(f"flat index {flat} out of bounds for shape {tuple(shape)}")
    out = []
    for dim in reversed(shape):
        out.append(flat % dim)
        flat //= dim
    return tuple(reversed(out))
