"""Tensor value type and the reverse-mode tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import TrackingError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float array, optionally tracked on a :class:`Tape`.

    Untracked tensors are plain values.  A tracked tensor remembers the tape
    and the index of the node that produced it (``tape_id``).
    """

    __slots__ = ("data", "tape", "tape_id")
    __array_priority__ = 1000

    def __init__(self, data, tape: "Tape | None" = None, tape_id: int | None = None):
        arr = np.asarray(data)
        if arr.dtype != DTYPE and arr.dtype != np.float32:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = f", tape_id={self.tape_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("parents", "backward", "name")

    def __init__(self, parents: tuple, backward: BackwardFn | None, name: str | None):
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Nodes are appended in execution order, so the list is already a
    topological order.  A fresh tape is expected per forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self._leaf_shapes: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value, name: str) -> Tensor:
        """Register ``value`` as a named leaf and return its tracked tensor."""
        if name in self.leaves:
            raise TrackingError(f"leaf {name!r} already watched on this tape")
        data = value.data if isinstance(value, Tensor) else value
        node_id = len(self.nodes)
        self.nodes.append(_Node((), None, name))
        self.leaves[name] = node_id
        self._leaf_shapes[name] = np.shape(data)
        return Tensor(np.asarray(data, dtype=DTYPE), self, node_id)

    def watch_all(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(value, name) for name, value in params.items()}

    def record(self, data: np.ndarray, parents: Sequence, backward: BackwardFn) -> Tensor:
        ids = tuple(
            p.tape_id if isinstance(p, Tensor) and p.tape is self else None for p in parents
        )
        node_id = len(self.nodes)
        self.nodes.append(_Node(ids, backward, None))
        return Tensor(data, self, node_id)


def backward(loss: Tensor, tape: Tape | None = None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every named leaf of ``tape``.

    Leaves the loss does not depend on receive zeros.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise TrackingError("loss is not tracked on any tape")
    if tape is None:
        tape = loss.tape
    if loss.tape is not tape:
        raise TrackingError("loss was produced on a different tape")
    if loss.data.size != 1:
        raise TrackingError(f"loss must be a scalar, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.tape_id] = np.ones_like(loss.data, dtype=DTYPE)
    for node_id in range(loss.tape_id, -1, -1):
        g = grads[node_id]
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.backward is None:
            continue
        parent_grads = node.backward(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
        grads[node_id] = None

    out = {}
    for name, node_id in tape.leaves.items():
        g = grads[node_id]
        out[name] = np.zeros(tape._leaf_shapes[name]) if g is None else g
    return out
