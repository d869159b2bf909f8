"""Dense tensors with reverse-mode automatic differentiation.

Values live in a row-major numpy buffer of the active precision (float32 for
training, float64 inside ``precision(np.float64)`` blocks used by gradient
oracles). Rank is limited to 4 (batch x tokens x heads x dim).

Precision and grad mode are per context: each thread (and each asyncio task)
sees its own setting, so a ``no_grad`` block in one worker never leaks into
another.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = ["Tensor", "precision", "default_dtype", "grad_enabled", "no_grad", "MAX_RANK"]

MAX_RANK = 4

_dtype: ContextVar = ContextVar("tensor_dtype", default=np.float32)
_grad_enabled: ContextVar = ContextVar("tensor_grad_enabled", default=True)


def default_dtype():
    return _dtype.get()


def grad_enabled() -> bool:
    return _grad_enabled.get()


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node on the autodiff tape.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    buffer accumulates across ``backward`` calls until ``zero_grad``.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str = "",
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "leaf",
    ):
        array = np.asarray(data, dtype=default_dtype())
        if not array.flags.c_contiguous:
            array = array.copy(order="C")
        if array.ndim > MAX_RANK:
            raise DimensionError(f"rank {array.ndim} exceeds the supported maximum of {MAX_RANK}")
        if not np.isfinite(array).all():
            raise NumericalError(f"non-finite value produced by '{_op}'")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        tracked = _grad_enabled.get() and any(p.requires_grad for p in parents)
        if not tracked:
            return cls(data, _op=op)
        return cls(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate ``grad`` of every leaf reachable from this scalar.

        Repeated calls without ``zero_grad`` accumulate into the leaves.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any parameter")

        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __pow__(self, exponent: float):
        from . import functional as F
        return F.power(self, exponent)
