"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive builds a fresh node that records its parents and a closure
mapping the upstream gradient to one gradient per parent. The graph is
rebuilt on every forward pass and released once the caller drops the root.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class NonFiniteError(ValueError):
    """Raised when a primitive receives NaN or infinite input."""


class Tensor:
    __slots__ = (
        "data",
        "_grad",
        "requires_grad",
        "detached",
        "retain_grad",
        "op",
        "parents",
        "_backward",
        "name",
    )

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        dtype=None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.detached = False
        self.retain_grad = False
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.affine(self, -1.0, 0.0)

    def __sub__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.affine(self, 1.0, -float(other))
        return ops.add(self, ops.affine(as_tensor(other), -1.0, 0.0))

    def __rsub__(self, other):
        from . import ops

        return ops.affine(self, -1.0, float(other))

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops

        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops

        return ops.mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
    op: str,
    detach: bool = False,
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.detached = detach
    out.retain_grad = False
    out.op = op
    out.parents = tuple(parents)
    out._backward = backward_fn
    out.name = None
    out.requires_grad = (not detach) and any(p.requires_grad for p in parents)
    return out


def check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.detached:
            continue
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(node) into every reachable leaf requiring grad.

    Repeated calls add to existing gradients; call ``zero_grad`` on the
    parameters to reset. Intermediate nodes only keep their gradient when
    ``retain_grad`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad)}
    for node in reversed(_toposort(loss)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retain_grad:
            node._grad = g.copy() if node._grad is None else node._grad + g
        if node.is_leaf or node.detached:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg
