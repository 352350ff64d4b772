"""4-D tensors with reverse-mode automatic differentiation.

The value type is a dense (batch, height, width, channels) array backed by a
numpy buffer, always row-major and always 4-D; scalars live in shape
(1, 1, 1, 1). Operations compute eagerly. While a :class:`Graph` is active
(see :func:`recording`), every operation whose inputs participate in
differentiation appends a :class:`Node` holding the input tensors, the
produced output, and a closure mapping the upstream gradient to per-input
gradients. :func:`backward` replays the tape once, in reverse, accumulating
gradients across fan-out.

Tensors are treated as immutable once produced by an operation; optimizers
may rewrite leaf ``.data`` buffers between recorded forward passes. Nothing
here mutates a stored gradient in place, so gradient arrays may be shared.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "recording",
    "active_graph",
    "record_op",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "tensor",
    "zeros",
    "scalar",
    "elementwise_add",
    "multiply",
    "scale",
    "relu",
    "sigmoid",
    "concat_channels",
    "slice_channels",
    "sum_all",
    "backward",
]

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    """Set the element type used for newly created tensors.

    32-bit floats are the production default; verification runs switch to
    64-bit end to end so finite-difference checks are meaningful.
    """
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ShapeError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


def default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default element type (e.g. for verification)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense (batch, height, width, channels) value.

    ``requires_grad`` marks leaves that should receive gradients; outputs of
    recorded operations inherit it so gradients can chain. ``grad`` is filled
    by :func:`backward` and always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=np.dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in _ALLOWED_DTYPES:
                arr = arr.astype(_default_dtype)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are 4-D (batch, height, width, channels); got shape {arr.shape}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor(data, shape: Sequence[int] | None = None, requires_grad: bool = False) -> Tensor:
    """Build a tensor, optionally reshaping flat data into an explicit 4-D shape."""
    arr = np.asarray(data, dtype=_default_dtype)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_default_dtype), requires_grad=requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=_default_dtype), requires_grad=requires_grad)


# A backward rule receives d(loss)/d(output) and returns one gradient per
# input (None where an input is a non-differentiable constant).
BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Graph:
    """Append-only tape of recorded operations, in execution order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_graph_stack: list[Graph] = []


def active_graph() -> Graph | None:
    return _graph_stack[-1] if _graph_stack else None


@contextmanager
def recording(graph: Graph | None = None):
    """Activate a graph; operations executed inside are recorded onto it."""
    g = graph if graph is not None else Graph()
    _graph_stack.append(g)
    try:
        yield g
    finally:
        _graph_stack.pop()


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_rule: BackwardRule,
) -> Tensor:
    """Wrap an eagerly computed result and register its backward rule.

    This is the extension point composite operators (convolutions, losses)
    use; when no graph is active the result is returned untracked.
    """
    out = Tensor(out_data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.record(Node(op, tuple(inputs), out, backward_rule))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; both inputs receive the upstream gradient unchanged."""
    _check_same_shape("elementwise_add", a, b)
    out = a.data + b.data

    def rule(g: np.ndarray):
        return g, g

    return record_op("add", (a, b), out, rule)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (Hadamard)."""
    _check_same_shape("multiply", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray):
        return g * b_data, g * a_data

    return record_op("mul", (a, b), out, rule)


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out = x.data * alpha

    def rule(g: np.ndarray):
        return (g * alpha,)

    return record_op("scale", (x,), out, rule)


def relu(x: Tensor) -> Tensor:
    """max(0, x); gradient passes where x > 0 and is zero elsewhere."""
    out = np.maximum(x.data, 0)
    positive = x.data > 0

    def rule(g: np.ndarray):
        return (g * positive,)

    return record_op("relu", (x,), out, rule)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function 1 / (1 + exp(-x)), computed overflow-free."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", (x,), out, rule)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving argument order.

    The backward rule splits the upstream gradient back into the original
    channel ranges, so concat followed by the matching channel slices is an
    exact round trip.
    """
    if len(parts) == 0:
        raise ShapeError("concat_channels: need at least one part")
    first = parts[0].shape[:3]
    for p in parts[1:]:
        if p.shape[:3] != first:
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {p.shape[:3]} vs {first}"
            )
    out = np.concatenate([p.data for p in parts], axis=3)
    widths = [p.channels for p in parts]

    def rule(g: np.ndarray):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[:, :, :, start : start + w])
            start += w
        return grads

    return record_op("concat", tuple(parts), out, rule)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop); gradient scatters back into place."""
    c = x.channels
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for {c} channels")
    out = x.data[:, :, :, start:stop]
    shape = x.shape

    def rule(g: np.ndarray):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, :, start:stop] = g
        return (gx,)

    return record_op("slice", (x,), out, rule)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a (1, 1, 1, 1) scalar tensor."""
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)
    shape = x.shape

    def rule(g: np.ndarray):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return record_op("sum_all", (x,), out, rule)


def _validate_graph(graph: Graph) -> dict[int, int]:
    produced: dict[int, int] = {}
    for idx, node in enumerate(graph.nodes):
        oid = id(node.output)
        if oid in produced:
            raise GraphError(f"tensor produced twice (node {idx}, op {node.op})")
        produced[oid] = idx
    for idx, node in enumerate(graph.nodes):
        for inp in node.inputs:
            j = produced.get(id(inp))
            if j is not None and j >= idx:
                raise GraphError(
                    f"graph is not topologically ordered at node {idx} ({node.op}); cycle?"
                )
    return produced


def backward(loss: Tensor, graph: Graph) -> dict[Tensor, np.ndarray]:
    """Reverse-sweep the tape and return d(loss)/d(t) for participating tensors.

    ``loss`` must be scalar and must have been produced by ``graph``. Every
    tensor with ``requires_grad`` that appears in the graph ends up in the
    returned map (zero-filled if the loss does not depend on it) and gets its
    ``grad`` attribute set. Gradients accumulate across fan-out.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward: loss must be scalar (1,1,1,1), got {loss.shape}")
    produced = _validate_graph(graph)
    if id(loss) not in produced:
        raise GraphError("backward: loss tensor was not produced by this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    by_id: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(graph.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue  # not on the loss's ancestor path
        in_grads = node.backward(g_out)
        if len(in_grads) != len(node.inputs):
            raise GraphError(f"backward rule of {node.op} returned wrong arity")
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if gi.shape != inp.shape:
                raise GraphError(
                    f"backward rule of {node.op} produced gradient shape {gi.shape} "
                    f"for input shape {inp.shape}"
                )
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            by_id[key] = inp

    # Tensors that participate in the graph but are unreachable from the loss
    # have a well-defined gradient of zero.
    for node in graph.nodes:
        for t in (*node.inputs, node.output):
            if t.requires_grad and id(t) not in grads:
                grads[id(t)] = np.zeros(t.shape, dtype=loss.dtype)
                by_id[id(t)] = t

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = by_id[key]
        if t.requires_grad:
            t.grad = g
            result[t] = g
    return result
