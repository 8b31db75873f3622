"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a :class:`Tensor` whose ``node``
records the inputs and a backward rule.  Nodes carry a global, monotonically
increasing index, so reverse-index order is exactly the reverse of forward
recording order.  :class:`Graph` is an explicit tape over the same nodes.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "zeros",
    "ones",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "make_node",
    "sum_to_shape",
    "concat",
    "where",
    "forward",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the named operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the recording/backward protocol."""


_state = threading.local()
_counter = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float32 by default).

    Gradient checks run under ``default_dtype(np.float64)`` so that finite
    differences are not swamped by single-precision rounding.
    """
    old = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def no_grad():
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def _check_finite(name: str, data: np.ndarray) -> None:
    # Cheap scalar probe first; a full scan only if the probe trips.
    with np.errstate(over="ignore", invalid="ignore"):
        probe = data.sum(dtype=np.float64)
    if not np.isfinite(probe) and not np.isfinite(data).all():
        raise NonFiniteError(f"{name}: non-finite values in output of shape {data.shape}")


class Node:
    """One recorded operation: inputs, output and a backward rule."""

    __slots__ = ("name", "index", "inputs", "backward_fn", "__weakref__")

    def __init__(self, name: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.name = name
        self.index = next(_counter)
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.name!r}, index={self.index})"


class Tensor:
    """A dense array plus autodiff bookkeeping.

    ``data`` is a contiguous numpy array in the default dtype.  ``grad`` is
    populated by :meth:`backward` on tensors with ``requires_grad=True`` and
    accumulates until :meth:`zero_grad` is called.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, _node: Node | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != get_default_dtype() and _node is None:
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node = _node

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


# -- recording -------------------------------------------------------------


def make_node(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``inputs``.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    input, each with that input's shape.  Recording is skipped when grad
    mode is off or no input requires a gradient.
    """
    _check_finite(name, data)
    data = np.asarray(data)
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(data)
    node = Node(name, inputs, backward_fn)
    for g in _get("graphs", ()):
        g.nodes.append(node)
    return Tensor(data, requires_grad=True, _node=node)


def backward(loss: Tensor, grad: np.ndarray | None = None, *, nodes: Sequence[Node] | None = None) -> None:
    """Propagate d(loss)/d(.) to every reachable tensor with ``requires_grad``.

    Intermediate gradients live only for the duration of the call; leaf
    tensors accumulate into ``.grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError(f"backward: seed gradient shape {grad.shape} != output shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    if loss.node is None:
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return

    if nodes is None:
        nodes = _ancestry(loss.node)
    # Non-leaf gradients are keyed by producing node, leaf gradients by tensor.
    pending: dict[int, np.ndarray] = {id(loss.node): grad}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in sorted(nodes, key=lambda n: -n.index):
        g_out = pending.pop(id(node), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        if len(in_grads) != len(node.inputs):
            raise GraphError(f"{node.name}: backward returned {len(in_grads)} grads for {len(node.inputs)} inputs")
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ShapeError(f"{node.name}: gradient shape {g.shape} != input shape {t.shape}")
            if t.node is not None:
                key = id(t.node)
                pending[key] = pending[key] + g if key in pending else g
            else:
                key = id(t)
                leaves[key] = (t, leaves[key][1] + g) if key in leaves else (t, g)
    for t, g in leaves.values():
        t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g


def _ancestry(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    return list(seen.values())


class Graph:
    """Explicit tape of the operations recorded while it is active.

    >>> g = Graph()
    >>> out = g.forward(lambda x: x * x, x=tensor([1.0, 2.0], requires_grad=True))
    >>> g.backward(out["output"].sum())
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._ran = False

    def __enter__(self) -> "Graph":
        _state.graphs = _get("graphs", ()) + (self,)
        self._ran = True
        return self

    def __exit__(self, *exc) -> None:
        graphs = list(_get("graphs", ()))
        graphs.remove(self)
        _state.graphs = tuple(graphs)

    def forward(self, fn: Callable, **inputs: Tensor) -> dict[str, Tensor]:
        """Run ``fn(**inputs)`` while recording; returns named outputs."""
        self.nodes.clear()
        with self:
            result = fn(**inputs)
        if isinstance(result, dict):
            return result
        if isinstance(result, (tuple, list)):
            return {f"output{i}": r for i, r in enumerate(result)}
        return {"output": result}

    def backward(self, loss: Tensor) -> None:
        if not self._ran:
            raise GraphError("backward called before forward")
        if loss.node is None:
            raise GraphError("loss was not produced by this graph's forward pass")
        nodes = _ancestry(loss.node)
        taped = {id(n) for n in self.nodes}
        if not any(id(n) in taped for n in nodes):
            raise GraphError("loss was not produced by this graph's forward pass")
        backward(loss, nodes=nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def forward(graph: Graph, fn: Callable, **inputs: Tensor) -> dict[str, Tensor]:
    return graph.forward(fn, **inputs)


# -- broadcasting helpers -------------------------------------------------


def sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------


def add(a, b, name: str = "add") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(name, a, b)
    sa, sb = a.shape, b.shape
    return make_node(name, a.data + b.data, (a, b), lambda g: (sum_to_shape(g, sa), sum_to_shape(g, sb)))


def sub(a, b, name: str = "sub") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(name, a, b)
    sa, sb = a.shape, b.shape
    return make_node(name, a.data - b.data, (a, b), lambda g: (sum_to_shape(g, sa), sum_to_shape(-g, sb)))


def mul(a, b, name: str = "mul") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(name, a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = sum_to_shape(g * bd, ad.shape) if a.requires_grad else None
        gb = sum_to_shape(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(name, ad * bd, (a, b), bw)


def div(a, b, name: str = "div") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast(name, a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        ga = sum_to_shape(g / bd, ad.shape) if a.requires_grad else None
        gb = sum_to_shape(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(name, out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_node("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = ad**exponent
    return make_node("pow", out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_node("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_node("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_node("log", out, (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor, name: str = "sigmoid") -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_node(name, out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, negative_slope: float = 0.01, name: str = "leaky_relu") -> Tensor:
    x = a.data
    pos = x >= 0
    out = np.where(pos, x, x * x.dtype.type(negative_slope))
    return make_node(name, out, (a,), lambda g: (np.where(pos, g, g * g.dtype.type(negative_slope)),))


def relu(a: Tensor, name: str = "relu") -> Tensor:
    x = a.data
    pos = x > 0
    return make_node(name, np.where(pos, x, 0).astype(x.dtype), (a,), lambda g: (g * pos,))


def where(cond: np.ndarray, a, b, name: str = "where") -> Tensor:
    """Select from ``a`` where the (constant) mask holds, else from ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return make_node(
        name,
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (sum_to_shape(np.where(cond, g, 0), sa), sum_to_shape(np.where(cond, 0, g), sb)),
    )


# -- reductions and shape ops ---------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False, name: str = "sum") -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(name, np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims, name="mean") * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_node("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_node("getitem", np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b, name: str = "matmul") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_node(name, ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def parameters_checksum(params: Iterable[Tensor]) -> str:
    """Hex digest over parameter bytes; used to compare training runs."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
