"""Define-by-run reverse-mode differentiation over numpy float64 arrays."""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def assert_finite(arr: np.ndarray, what: str = "tensor") -> None:
    # a single reduction is cheaper than isfinite() on large maps; inf/nan propagate
    if arr.size and not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Differentiable n-d array.

    Leaves created with ``requires_grad=True`` are parameters; everything
    produced by an op while recording is enabled keeps a link to its parents
    and a closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_id",
                 "_parents", "_backward", "_op", "_retain", "_freed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._retain = False
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on this intermediate after backward (feature-map taps)."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.take_rows(self, index)

    def backward(self, retain_graph: bool = False) -> dict["Tensor", np.ndarray]:
        return backward(self, retain_graph=retain_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    """Wrap an op result, linking it into the graph when any parent needs grad."""
    assert_finite(out_data, f"output of {op}")
    out = Tensor(out_data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.tape_id in seen:
            continue
        seen.add(node.tape_id)
        stack.append((node, True))
        for p in node._parents:
            if p.tape_id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every parameter leaf.

    Returns a mapping from each leaf that required grad to its gradient
    from this pass. Unless ``retain_graph`` is set, the graph is released
    and a second call raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise AutodiffError("graph already released; call backward(retain_graph=True) first")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor requiring grad")

    topo = _toposort(loss)
    pending: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = pending.pop(node.tape_id, None)
        if g is None:
            continue
        assert_finite(g, f"gradient at {node._op}")
        is_leaf = node._backward is None
        if is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if is_leaf:
                leaves[node] = g
        if is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node._op}: gradient shape {pg.shape} != {parent.shape}")
            prev = pending.get(parent.tape_id)
            pending[parent.tape_id] = pg if prev is None else prev + pg

    if not retain_graph:
        for node in topo:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True
    return leaves
