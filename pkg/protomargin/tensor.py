"""
Tensor and reverse-mode tape for protomargin.

Provides a dense float64 tensor that remembers the operation that produced it,
and a tape that replays those operations backwards to accumulate exact gradients.
"""

from __future__ import annotations

import logging
import threading
from abc import ABC, abstractmethod
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np


logger = logging.getLogger("protomargin.autodiff")

ArrayLike = np.ndarray | float | int | Sequence[Any]

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def is_grad_enabled() -> bool:
    """Return True when new operations are recorded for backpropagation."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording for the current thread.

    Example:
        ```python
        from protomargin.tensor import no_grad

        with no_grad():
            result = model.forward(images)
        ```
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Function(ABC):
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient per input (None for inputs that do not
    need one). Intermediates needed by `backward` go into `self.saved`.
    """

    op_name: str = "op"

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs
        self.saved: dict[str, Any] = {}

    @abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        """Compute the output array from the input arrays."""

    @abstractmethod
    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        """Return d(loss)/d(input) for every input given d(loss)/d(output)."""

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        """Run the operation and attach it to the output when recording."""
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.op_name} produced non-finite values")

        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if not requires_grad:
            fn.saved.clear()
            return Tensor(out)
        return Tensor(out, requires_grad=True, creator=fn)


class Tensor:
    """
    Dense n-dimensional float64 array with optional gradient.

    Attributes:
        data: Row-major float64 values.
        requires_grad: Whether backward should produce a gradient for this tensor.
        grad: Accumulated gradient with the same shape as `data`, or None.
        creator: The Function that produced this tensor, None for leaves.

    Example:
        ```python
        from protomargin.tensor import Tensor

        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        x.grad  # array([2., 4., 6.])
        ```
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Function | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.creator = creator

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # Backpropagation
    # ------------------------------------------------------------------

    def backward(self) -> Tape:
        """Backpropagate from this scalar and return the tape that was replayed."""
        tape = Tape.record(self)
        tape.backward()
        return tape

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def __add__(self, other: Tensor | float) -> Tensor:
        from protomargin import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        from protomargin import functional as F

        return F.add(self, F.neg(as_tensor(other)))

    def __rsub__(self, other: Tensor | float) -> Tensor:
        from protomargin import functional as F

        return F.add(F.neg(self), other)

    def __neg__(self) -> Tensor:
        from protomargin import functional as F

        return F.neg(self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from protomargin import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a constant")
        from protomargin import functional as F

        return F.mul(self, 1.0 / float(other))

    def __matmul__(self, other: Tensor) -> Tensor:
        from protomargin import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        from protomargin import functional as F

        return F.index(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        from protomargin import functional as F

        return F.sum(self, axis=axis)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        from protomargin import functional as F

        return F.mean(self, axis=axis)

    def reshape(self, *shape: int) -> Tensor:
        from protomargin import functional as F

        return F.reshape(self, shape)


def as_tensor(value: Tensor | ArrayLike) -> Tensor:
    """Wrap a constant in a Tensor, passing tensors through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeNode:
    """One recorded operation: its function, inputs, and the tensor it produced."""

    op: str
    function: Function
    output: Tensor

    @property
    def inputs(self) -> tuple[Tensor, ...]:
        return self.function.inputs


class Tape:
    """
    Ordered record of the operations behind a scalar output.

    Nodes are kept in topological order (every node after the nodes producing its
    inputs). `backward` walks them in reverse, visiting each exactly once and
    adding gradients at fan-out points.
    """

    def __init__(self, output: Tensor, nodes: list[TapeNode]) -> None:
        self.output = output
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        """Collect the nodes reachable from `output` in topological order."""
        order: list[TapeNode] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]

        while stack:
            tensor, expanded = stack.pop()
            fn = tensor.creator
            if fn is None:
                continue
            if expanded:
                order.append(TapeNode(fn.op_name, fn, tensor))
                continue
            if id(fn) in visited:
                continue
            visited.add(id(fn))
            stack.append((tensor, True))
            for parent in reversed(fn.inputs):
                if parent.creator is not None and id(parent.creator) not in visited:
                    stack.append((parent, False))

        return cls(output, order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        """Accumulate d(output)/d(t) into `t.grad` for every tensor needing it."""
        if self.output.size != 1:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {self.output.shape}"
            )
        if not self.output.requires_grad:
            raise ValueError("backward called on a tensor that does not require grad")

        self.output.grad = np.ones_like(self.output.data)
        for node in reversed(self.nodes):
            grad_out = node.output.grad
            if grad_out is None:
                continue
            grads = node.function.backward(grad_out)
            for tensor, grad in zip(node.inputs, grads, strict=True):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(
                        f"{node.op} produced gradient of shape {grad.shape} "
                        f"for input of shape {tensor.shape}"
                    )
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=np.float64, copy=True)
                else:
                    tensor.grad = tensor.grad + grad

        logger.debug("backward replayed %d nodes", len(self.nodes))
