"""Tensor container and reverse-mode accumulation."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NonScalarLoss

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forward passes keep no buffers."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional float array with an optional autodiff record.

    `data` is float32 or float64; `grad` (same shape) is allocated lazily on
    the first accumulation. Non-leaf tensors carry the closure that routes
    their gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction of graph nodes (used by ops) --
    @classmethod
    def _result(cls, data, parents, backward):
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Reverse-mode accumulation from a scalar loss."""
        if self.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            fn = node._backward
            if fn is not None:
                fn(node.grad)
                # free the graph edge and buffer; leaves keep their grads
                node._backward = None
                node._parents = ()
                node.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- convenience operators used in tests and heads --
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __repr__(self):
        tag = "grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, {tag})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))
