"""Dense tensor values and the recording tape for reverse-mode differentiation.

A ``Tensor`` wraps a row-major (C-contiguous) numpy array in single or double
precision.  Tensors are treated as immutable values: operations return new
tensors and never write into their operands.

Differentiation uses an explicit tape.  Creating a ``Graph`` and wrapping
arrays via ``Graph.parameter`` / ``Graph.constant`` attaches them to the tape;
any operation touching an attached tensor records a node holding the operation
kind, its input node ids, the output value, and forward/backward closures.
Node ids are append-ordered, which is a topological order by construction.
``backward`` walks the tape in reverse and returns a gradient per parameter
node.  Operations on unattached tensors evaluate eagerly and record nothing,
so the same code serves both inference and training.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeMismatchError

_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense n-dimensional array value.

    Attributes:
        array: the underlying C-contiguous numpy array (float32 or float64).
        graph: the Graph this value is recorded on, or None.
        node_id: id of the tape node that produced this value, or None.
    """

    __slots__ = ("array", "graph", "node_id")

    def __init__(self, array, graph: "Graph | None" = None, node_id: int | None = None):
        if isinstance(array, Tensor):
            array = array.array
        arr = np.asarray(array)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.array = arr
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def precision(self) -> str:
        return "single" if self.array.dtype == np.float32 else "double"

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying buffer."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.array.reshape(()))

    def astype(self, dtype) -> "Tensor":
        """Detached copy in the requested precision."""
        return Tensor(self.array.astype(dtype))

    def detach(self) -> "Tensor":
        return Tensor(self.array)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}, {self.precision}{tag})"


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("id", "op", "inputs", "value", "is_param", "name", "fwd", "bwd")

    def __init__(self, node_id, op, inputs, value, is_param, name, fwd, bwd):
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.is_param = is_param
        self.name = name
        self.fwd = fwd
        self.bwd = bwd


class Graph:
    """Append-only tape of operations; ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_names: dict[str, int] = {}

    def _append(self, op, inputs, value, is_param, name, fwd, bwd) -> Node:
        node = Node(len(self.nodes), op, inputs, value, is_param, name, fwd, bwd)
        self.nodes.append(node)
        return node

    def parameter(self, value, name: str | None = None) -> Tensor:
        """Register a trainable leaf.  A given name may appear only once."""
        if name is not None:
            if name in self._param_names:
                raise ContractError(f"parameter {name!r} registered twice")
            self._param_names[name] = len(self.nodes)
        arr = Tensor(value).array
        node = self._append("parameter", [], arr, True, name, None, None)
        return Tensor(arr, self, node.id)

    def constant(self, value) -> Tensor:
        """Record a non-trainable leaf (inputs, targets, fixed operators)."""
        arr = Tensor(value).array
        node = self._append("constant", [], arr, False, None, None, None)
        return Tensor(arr, self, node.id)

    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.is_param]

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def replay(self) -> list[np.ndarray]:
        """Recompute every non-leaf node from leaf values.

        Returns the recomputed value per node (leaves return their stored
        value).  The stored tape is left untouched so callers can compare.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.fwd is None:
                values.append(node.value)
            else:
                values.append(node.fwd(*[values[i] for i in node.inputs]))
        return values


# ---------------------------------------------------------------------------
# recording machinery
# ---------------------------------------------------------------------------


def _as_tensor(x, ref: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.dtype if ref is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result_graph(operands: Sequence[Tensor]) -> "Graph | None":
    graph = None
    for t in operands:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise ContractError("operands were recorded on different graphs")
    return graph


def apply_op(op: str, operands: Sequence[Tensor], fwd: Callable, bwd: Callable | None) -> Tensor:
    """Evaluate ``fwd`` on raw arrays; record a node if any operand is taped.

    ``fwd`` must be pure (capture only static configuration) so the tape can
    be replayed.  ``bwd(grad, inputs, out)`` returns one gradient array per
    input, or None for inputs that do not receive gradient.
    """
    out = fwd(*[t.array for t in operands])
    graph = _result_graph(operands)
    if graph is None:
        return Tensor(out)
    ids = [t.node_id if t.graph is not None else graph.constant(t).node_id for t in operands]
    node = graph._append(op, ids, out, False, None, fwd, bwd)
    return Tensor(out, graph, node.id)


def backward(graph: Graph, loss) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar loss node.

    Returns a map from parameter node id to its gradient; parameters the loss
    does not depend on get zero gradients.
    """
    if isinstance(loss, Tensor):
        if loss.graph is not graph:
            raise ContractError("loss tensor is not recorded on this graph")
        loss_id = loss.node_id
    else:
        loss_id = int(loss)
    if not 0 <= loss_id < len(graph.nodes):
        raise ContractError(f"no node {loss_id} on this graph")
    loss_node = graph.nodes[loss_id]
    if loss_node.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss_node.value.shape}")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss_id] = np.ones_like(loss_node.value)
    for node in reversed(graph.nodes[: loss_id + 1]):
        out_grad = grads[node.id]
        if out_grad is None or node.bwd is None:
            continue
        in_values = [graph.nodes[i].value for i in node.inputs]
        in_grads = node.bwd(out_grad, in_values, node.value)
        for input_id, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = g
            else:
                grads[input_id] = grads[input_id] + g

    result = {}
    for node in graph.parameters():
        g = grads[node.id]
        result[node.id] = Tensor(g if g is not None else np.zeros_like(node.value))
    return result


def grads_by_name(graph: Graph, grad_map: dict[int, Tensor]) -> dict[str, Tensor]:
    """Re-key a backward() result by parameter name (named parameters only)."""
    out = {}
    for node in graph.parameters():
        if node.name is not None:
            out[node.name] = grad_map[node.id]
    return out


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def _broadcast_shape(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatchError(f"cannot broadcast {a_shape} with {b_shape}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the broadcast axes of ``grad`` away so it matches ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bwd(g, ins, out):
        return [_unbroadcast(g, sa), _unbroadcast(g, sb)]

    return apply_op("add", [a, b], lambda x, y: x + y, bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bwd(g, ins, out):
        return [_unbroadcast(g, sa), _unbroadcast(-g, sb)]

    return apply_op("sub", [a, b], lambda x, y: x - y, bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bwd(g, ins, out):
        x, y = ins
        return [_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)]

    return apply_op("mul", [a, b], lambda x, y: x * y, bwd)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bwd(g, ins, out):
        x, y = ins
        return [_unbroadcast(g / y, sa), _unbroadcast(-g * out / y, sb)]

    return apply_op("div", [a, b], lambda x, y: x / y, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("neg", [a], lambda x: -x, lambda g, ins, out: [-g])


def log(a) -> Tensor:
    """Natural log; inputs must be positive."""
    a = _as_tensor(a)
    return apply_op("log", [a], np.log, lambda g, ins, out: [g / ins[0]])


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the un-clipped region."""
    a = _as_tensor(a)

    def bwd(g, ins, out):
        x = ins[0]
        return [g * ((x >= lo) & (x <= hi)).astype(x.dtype)]

    return apply_op("clip", [a], lambda x: np.clip(x, lo, hi), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    sa, sb = a.shape, b.shape

    def bwd(g, ins, out):
        x, y = ins
        da = np.matmul(g, np.swapaxes(y, -1, -2))
        db = np.matmul(np.swapaxes(x, -1, -2), g)
        return [_unbroadcast(da, sa), _unbroadcast(db, sb)]

    return apply_op("matmul", [a, b], np.matmul, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    tensors = [_as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis if axis >= 0 else axis + len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeMismatchError(f"concat shapes differ off axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g, ins, out):
        return [np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax)]

    return apply_op("concat", tensors, lambda *xs: np.concatenate(xs, axis=ax), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries from ``start`` along ``axis``."""
    a = _as_tensor(a)
    ax = axis if axis >= 0 else axis + a.ndim
    if not (0 <= start and start + length <= a.shape[ax]):
        raise ShapeMismatchError(
            f"slice [{start}:{start + length}) out of range for axis {axis} of {a.shape}"
        )
    sel = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(a.ndim))

    def bwd(g, ins, out):
        dx = np.zeros_like(ins[0])
        dx[sel] = g
        return [dx]

    return apply_op("narrow", [a], lambda x: np.ascontiguousarray(x[sel]), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatchError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape

    def bwd(g, ins, out):
        return [g.reshape(in_shape)]

    return apply_op("reshape", [a], lambda x: np.ascontiguousarray(x.reshape(shape)), bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"{axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(g, ins, out):
        return [np.ascontiguousarray(g.transpose(inverse))]

    return apply_op("transpose", [a], lambda x: np.ascontiguousarray(x.transpose(axes)), bwd)


def swap_last_axes(a) -> Tensor:
    """Transpose the trailing two axes (batched matrix transpose)."""
    a = _as_tensor(a)
    perm = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, perm)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    return tuple(sorted(int(a) % ndim for a in axes))


def _expand_reduced(g, axes, keepdims):
    if keepdims:
        return g
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def reduce_sum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axes is not None and not isinstance(axes, (int, np.integer)) and len(axes) == 0:
        return a
    ax = _normalize_axes(axes, a.ndim)
    in_shape = a.shape

    def bwd(g, ins, out):
        return [np.ascontiguousarray(np.broadcast_to(_expand_reduced(g, ax, keepdims), in_shape))]

    return apply_op("sum", [a], lambda x: x.sum(axis=ax, keepdims=keepdims), bwd)


def reduce_mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axes is not None and not isinstance(axes, (int, np.integer)) and len(axes) == 0:
        return a
    ax = _normalize_axes(axes, a.ndim)
    in_shape = a.shape
    count = int(np.prod([in_shape[i] for i in ax], dtype=np.int64))

    def bwd(g, ins, out):
        scaled = _expand_reduced(g, ax, keepdims) / count
        return [np.ascontiguousarray(np.broadcast_to(scaled, in_shape))]

    return apply_op("mean", [a], lambda x: x.mean(axis=ax, keepdims=keepdims), bwd)


def reduce_max(a, axes=None, keepdims: bool = False) -> Tensor:
    """Max over axes; the subgradient goes to the first maximal element."""
    a = _as_tensor(a)
    if axes is not None and not isinstance(axes, (int, np.integer)) and len(axes) == 0:
        return a
    ax = _normalize_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in ax)
    perm = kept + ax
    in_shape = a.shape

    def bwd(g, ins, out):
        x = ins[0]
        g = _expand_reduced(g, ax, keepdims)
        kept_shape = tuple(in_shape[i] for i in kept)
        xt = x.transpose(perm).reshape(kept_shape + (-1,))
        idx = xt.argmax(axis=-1)
        dxt = np.zeros_like(xt)
        gk = g.transpose(perm).reshape(kept_shape)
        np.put_along_axis(dxt, idx[..., None], gk[..., None], axis=-1)
        dx = dxt.reshape(tuple(in_shape[i] for i in perm)).transpose(np.argsort(perm))
        return [np.ascontiguousarray(dx)]

    return apply_op("max", [a], lambda x: x.max(axis=ax, keepdims=keepdims), bwd)


# ---------------------------------------------------------------------------
# random construction and the finite-difference oracle
# ---------------------------------------------------------------------------


def tensor_random(shape, seed: int, dist: str = "uniform", scale: float = 1.0,
                  dtype=np.float32) -> Tensor:
    """Seed-deterministic random tensor.

    ``uniform`` draws from U[-scale, scale]; ``normal`` from N(0, scale^2).
    The stream is fixed by (shape, seed, dist, scale).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeMismatchError(f"invalid shape {shape}")
    rng = np.random.default_rng(seed)
    if dist == "uniform":
        arr = rng.uniform(-scale, scale, size=shape)
    elif dist == "normal":
        arr = rng.normal(0.0, scale, size=shape)
    else:
        raise ContractError(f"unknown distribution {dist!r}")
    return Tensor(arr.astype(dtype))


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], theta: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, in double precision.

    The independent oracle against which analytic backward rules are checked;
    it never goes through the tape.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = theta.array.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(values):
        out = f(Tensor(values))
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(base)
        flat[i] = orig - eps
        lo = evaluate(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad)
