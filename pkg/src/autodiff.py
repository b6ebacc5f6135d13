#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Graph is built once (inputs, constants, ops) and then evaluated many times
with fresh bindings. Gradients are emitted as ordinary graph nodes, so a
gradient expression can itself be differentiated. The critic's gradient
penalty needs exactly that: the norm of dD/dx enters a loss whose gradient
is taken w.r.t. the critic parameters.

Usage:
    g = Graph()
    x = g.input("x", (3,))
    y = g.sum(g.square(x))
    forward(g, {"x": [1.0, 2.0, 3.0]}, y)   # Tensor(14.0)
    grad(g, y, [x])[x]                      # Tensor([2.0, 4.0, 6.0])

Supported shapes are scalars, vectors and matrices. Elementwise binary ops
broadcast a scalar against anything and a row vector (m,) against a matrix
(n, m); nothing else.
"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import NonFiniteError, ShapeError, UnboundInputError
from logger_setup import LoggerSetup

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Autodiff")

NORM_EPS = 1e-12

Shape = Tuple[int, ...]


# ---------------------------------------------------------------------------
# 2) Tensor
# ---------------------------------------------------------------------------
class Tensor:
    """
    Immutable float64 array of rank 0, 1 or 2, stored row-major.

    In checked mode (the default) NaN and Inf are rejected at construction.
    """

    __slots__ = ("_array",)

    def __init__(self, values: Any, checked: bool = True):
        array = np.array(values, dtype=np.float64, copy=True, order="C")
        if array.ndim > 2:
            raise ShapeError(f"Tensor rank must be <= 2, got shape {array.shape}")
        if checked and not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Tensor of shape {array.shape} contains NaN or Inf")
        array.setflags(write=False)
        self._array = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Wrap an array computed internally without copying or checking it."""
        obj = cls.__new__(cls)
        obj._array = array
        return obj

    @property
    def shape(self) -> Shape:
        return tuple(self._array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        return self._array

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._array!r})"


Binding = Union[Tensor, np.ndarray, Sequence[float], float]


def _as_array(value: Binding) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.array
    return np.asarray(value, dtype=np.float64)


class GradientResult(dict):
    """Map from node id to a Tensor shaped like that node."""


# ---------------------------------------------------------------------------
# 3) Graph
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[int, ...]
    shape: Shape
    attrs: Tuple[Any, ...] = ()


def _broadcast_shape(sa: Shape, sb: Shape) -> Shape:
    if sa == sb or sb == ():
        return sa
    if sa == ():
        return sb
    if len(sa) == 2 and sb == (sa[1],):
        return sa
    if len(sb) == 2 and sa == (sb[1],):
        return sb
    raise ShapeError(f"Cannot broadcast shapes {sa} and {sb}")


def _axis_slice(ndim: int, axis: int, start: int, stop: int) -> Tuple[slice, ...]:
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


def _pad(x: np.ndarray, attrs: Tuple[Any, ...]) -> np.ndarray:
    axis, before, full_shape = attrs
    out = np.zeros(full_shape, dtype=np.float64)
    out[_axis_slice(len(full_shape), axis, before, before + x.shape[axis])] = x
    return out


_FORWARD: Dict[str, Callable[[List[np.ndarray], Tuple[Any, ...]], np.ndarray]] = {
    "add": lambda a, _: a[0] + a[1],
    "sub": lambda a, _: a[0] - a[1],
    "mul": lambda a, _: a[0] * a[1],
    "div": lambda a, _: a[0] / a[1],
    "scale": lambda a, at: a[0] * at[0],
    "shift": lambda a, at: a[0] + at[0],
    "matmul": lambda a, _: a[0] @ a[1],
    "transpose": lambda a, _: np.ascontiguousarray(a[0].T),
    "tanh": lambda a, _: np.tanh(a[0]),
    "sigmoid": lambda a, _: expit(a[0]),
    "softplus": lambda a, _: np.logaddexp(0.0, a[0]),
    "log": lambda a, _: np.log(a[0]),
    "exp": lambda a, _: np.exp(a[0]),
    "square": lambda a, _: a[0] * a[0],
    "sqrt": lambda a, _: np.sqrt(a[0]),
    "reduce_sum": lambda a, at: np.asarray(np.sum(a[0], axis=at[0]), dtype=np.float64),
    "broadcast": lambda a, at: np.broadcast_to(a[0], at[0]),
    "expand": lambda a, at: np.broadcast_to(np.expand_dims(a[0], at[0]), at[1]),
    "concat": lambda a, at: np.concatenate(a, axis=at[0]),
    "slice": lambda a, at: a[0][_axis_slice(a[0].ndim, at[0], at[1], at[2])],
    "pad": lambda a, at: _pad(a[0], at),
    "clip": lambda a, at: np.clip(a[0], at[0], at[1]),
    "clip_mask": lambda a, at: ((a[0] >= at[0]) & (a[0] <= at[1])).astype(np.float64),
}


class Graph:
    """
    Append-only computation graph.

    Node ids are list positions, and every node's inputs have smaller ids, so
    evaluating in id order is a valid topological order. Values from the last
    ``forward`` call are cached on the graph: evaluate one graph instance from
    one thread at a time.
    """

    def __init__(self, checked: bool = True):
        self.nodes: List[Node] = []
        self.roots: Dict[str, int] = {}
        self.output: Optional[int] = None
        self.checked = checked
        self._constants: Dict[int, np.ndarray] = {}
        self._values: List[Optional[np.ndarray]] = []
        self._bound = False
        self._grad_cache: Dict[Tuple[int, Tuple[int, ...]], Dict[int, int]] = {}

    # --- bookkeeping -------------------------------------------------------
    def __len__(self) -> int:
        return len(self.nodes)

    def shape_of(self, node_id: int) -> Shape:
        self._check_id(node_id)
        return self.nodes[node_id].shape

    def _check_id(self, node_id: int) -> None:
        if not 0 <= node_id < len(self.nodes):
            raise KeyError(f"Node id {node_id} is not in this graph ({len(self.nodes)} nodes)")

    def _append(self, op: str, inputs: Tuple[int, ...], shape: Shape, attrs: Tuple[Any, ...] = ()) -> int:
        for i in inputs:
            self._check_id(i)
        self.nodes.append(Node(op, inputs, tuple(shape), attrs))
        self._values.append(None)
        return len(self.nodes) - 1

    # --- leaves ------------------------------------------------------------
    def input(self, name: str, shape: Sequence[int]) -> int:
        if name in self.roots:
            raise ValueError(f"Duplicate graph input '{name}'")
        if len(shape) > 2:
            raise ShapeError(f"Input '{name}' has rank {len(shape)} > 2")
        node_id = self._append("input", (), tuple(int(s) for s in shape), (name,))
        self.roots[name] = node_id
        return node_id

    def constant(self, value: Any) -> int:
        array = np.array(value, dtype=np.float64)
        node_id = self._append("constant", (), array.shape)
        self._constants[node_id] = array
        self._values[node_id] = array
        return node_id

    # --- elementwise -------------------------------------------------------
    def _binary(self, op: str, a: int, b: int) -> int:
        return self._append(op, (a, b), _broadcast_shape(self.shape_of(a), self.shape_of(b)))

    def add(self, a: int, b: int) -> int:
        return self._binary("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self._binary("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self._binary("mul", a, b)

    def div(self, a: int, b: int) -> int:
        return self._binary("div", a, b)

    def scale(self, a: int, factor: float) -> int:
        """Multiply by a Python scalar."""
        return self._append("scale", (a,), self.shape_of(a), (float(factor),))

    def shift(self, a: int, offset: float) -> int:
        """Add a Python scalar."""
        return self._append("shift", (a,), self.shape_of(a), (float(offset),))

    def _unary(self, op: str, a: int) -> int:
        return self._append(op, (a,), self.shape_of(a))

    def tanh(self, a: int) -> int:
        return self._unary("tanh", a)

    def sigmoid(self, a: int) -> int:
        return self._unary("sigmoid", a)

    def softplus(self, a: int) -> int:
        return self._unary("softplus", a)

    def log(self, a: int) -> int:
        return self._unary("log", a)

    def exp(self, a: int) -> int:
        return self._unary("exp", a)

    def square(self, a: int) -> int:
        return self._unary("square", a)

    def sqrt(self, a: int) -> int:
        return self._unary("sqrt", a)

    def clip(self, a: int, low: float, high: float) -> int:
        """Clamp into [low, high]; the gradient is zero outside the interval."""
        return self._append("clip", (a,), self.shape_of(a), (float(low), float(high)))

    # --- linear algebra and reductions ------------------------------------
    def matmul(self, a: int, b: int) -> int:
        sa, sb = self.shape_of(a), self.shape_of(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise ShapeError(f"matmul needs (n,k)@(k,m), got {sa}@{sb}")
        return self._append("matmul", (a, b), (sa[0], sb[1]))

    def transpose(self, a: int) -> int:
        sa = self.shape_of(a)
        if len(sa) != 2:
            raise ShapeError(f"transpose needs a matrix, got {sa}")
        return self._append("transpose", (a,), (sa[1], sa[0]))

    def sum(self, a: int, axis: Optional[int] = None) -> int:
        sa = self.shape_of(a)
        if axis is None:
            return self._append("reduce_sum", (a,), (), (None,))
        if not 0 <= axis < len(sa):
            raise ShapeError(f"sum axis {axis} out of range for shape {sa}")
        out = tuple(s for k, s in enumerate(sa) if k != axis)
        return self._append("reduce_sum", (a,), out, (axis,))

    def mean(self, a: int, axis: Optional[int] = None) -> int:
        sa = self.shape_of(a)
        count = int(np.prod(sa)) if axis is None else sa[axis]
        return self.scale(self.sum(a, axis), 1.0 / count)

    def l2norm(self, a: int, axis: Optional[int] = None, eps: float = NORM_EPS) -> int:
        """sqrt(sum(a^2) + eps), smooth at the origin."""
        return self.sqrt(self.shift(self.sum(self.square(a), axis), eps))

    def concat(self, parts: Sequence[int], axis: int = 0) -> int:
        shapes = [self.shape_of(p) for p in parts]
        if not shapes:
            raise ShapeError("concat needs at least one input")
        ndim = len(shapes[0])
        if ndim == 0 or not 0 <= axis < ndim:
            raise ShapeError(f"concat axis {axis} invalid for shape {shapes[0]}")
        for s in shapes[1:]:
            if len(s) != ndim or any(s[k] != shapes[0][k] for k in range(ndim) if k != axis):
                raise ShapeError(f"concat shape mismatch: {shapes}")
        out = list(shapes[0])
        out[axis] = sum(s[axis] for s in shapes)
        return self._append("concat", tuple(parts), tuple(out), (axis,))

    def slice(self, a: int, start: int, stop: int, axis: int = 0) -> int:
        sa = self.shape_of(a)
        if not 0 <= axis < len(sa) or not 0 <= start < stop <= sa[axis]:
            raise ShapeError(f"slice [{start}:{stop}] on axis {axis} invalid for shape {sa}")
        out = list(sa)
        out[axis] = stop - start
        return self._append("slice", (a,), tuple(out), (axis, start, stop))

    # --- adjoint plumbing --------------------------------------------------
    def _broadcast(self, a: int, shape: Shape) -> int:
        return self._append("broadcast", (a,), shape, (shape,))

    def _expand(self, a: int, axis: int, shape: Shape) -> int:
        return self._append("expand", (a,), shape, (axis, shape))

    def _pad(self, a: int, axis: int, before: int, shape: Shape) -> int:
        return self._append("pad", (a,), shape, (axis, before, shape))

    def _unbroadcast(self, g: int, shape: Shape) -> int:
        gs = self.shape_of(g)
        if gs == shape:
            return g
        if shape == ():
            return self.sum(g)
        if len(shape) == 1 and len(gs) == 2 and gs[1] == shape[0]:
            return self.sum(g, axis=0)
        raise ShapeError(f"Cannot reduce adjoint of shape {gs} to {shape}")

    def _vjp(self, nid: int, g: int, need: List[bool]) -> List[Optional[int]]:
        """Adjoint contributions of node ``nid`` to each of its inputs, as new nodes."""
        node = self.nodes[nid]
        op, ins = node.op, node.inputs
        a = ins[0] if ins else -1

        if op in ("add", "sub"):
            b = ins[1]
            ga = self._unbroadcast(g, self.shape_of(a)) if need[0] else None
            gb = None
            if need[1]:
                gb = self._unbroadcast(g if op == "add" else self.scale(g, -1.0), self.shape_of(b))
            return [ga, gb]
        if op == "mul":
            b = ins[1]
            return [
                self._unbroadcast(self.mul(g, b), self.shape_of(a)) if need[0] else None,
                self._unbroadcast(self.mul(g, a), self.shape_of(b)) if need[1] else None,
            ]
        if op == "div":
            b = ins[1]
            return [
                self._unbroadcast(self.div(g, b), self.shape_of(a)) if need[0] else None,
                self._unbroadcast(self.scale(self.div(self.mul(g, nid), b), -1.0), self.shape_of(b))
                if need[1] else None,
            ]
        if op == "scale":
            return [self.scale(g, node.attrs[0])]
        if op == "shift":
            return [g]
        if op == "matmul":
            b = ins[1]
            return [
                self.matmul(g, self.transpose(b)) if need[0] else None,
                self.matmul(self.transpose(a), g) if need[1] else None,
            ]
        if op == "transpose":
            return [self.transpose(g)]
        if op == "tanh":
            return [self.mul(g, self.shift(self.scale(self.square(nid), -1.0), 1.0))]
        if op == "sigmoid":
            return [self.mul(g, self.mul(nid, self.shift(self.scale(nid, -1.0), 1.0)))]
        if op == "softplus":
            return [self.mul(g, self.sigmoid(a))]
        if op == "log":
            return [self.div(g, a)]
        if op == "exp":
            return [self.mul(g, nid)]
        if op == "square":
            return [self.mul(g, self.scale(a, 2.0))]
        if op == "sqrt":
            return [self.div(self.scale(g, 0.5), nid)]
        if op == "clip":
            low, high = node.attrs
            return [self.mul(g, self._append("clip_mask", (a,), self.shape_of(a), (low, high)))]
        if op == "reduce_sum":
            axis = node.attrs[0]
            if axis is None:
                return [self._broadcast(g, self.shape_of(a))]
            return [self._expand(g, axis, self.shape_of(a))]
        if op == "broadcast":
            return [self.sum(g)]
        if op == "expand":
            return [self.sum(g, node.attrs[0])]
        if op == "concat":
            axis = node.attrs[0]
            out: List[Optional[int]] = []
            offset = 0
            for k, part in enumerate(ins):
                width = self.shape_of(part)[axis]
                out.append(self.slice(g, offset, offset + width, axis) if need[k] else None)
                offset += width
            return out
        if op == "slice":
            axis, start, _ = node.attrs
            return [self._pad(g, axis, start, self.shape_of(a))]
        if op == "pad":
            axis, before, _ = node.attrs
            width = self.shape_of(a)[axis]
            return [self.slice(g, before, before + width, axis)]
        # input, constant, clip_mask: leaves or piecewise-constant
        return [None] * len(ins)

    # --- evaluation --------------------------------------------------------
    def bind(self, bindings: Mapping[Union[str, int], Binding]) -> None:
        by_name: Dict[str, Binding] = {}
        id_to_name = {v: k for k, v in self.roots.items()}
        for key, value in bindings.items():
            name = id_to_name.get(key) if isinstance(key, int) else key
            if name is None or name not in self.roots:
                raise UnboundInputError(f"No graph input named {key!r}")
            by_name[name] = value

        self._values = [None] * len(self.nodes)
        for node_id, array in self._constants.items():
            self._values[node_id] = array
        for name, node_id in self.roots.items():
            if name not in by_name:
                raise UnboundInputError(f"Graph input '{name}' is not bound")
            array = _as_array(by_name[name])
            if tuple(array.shape) != self.nodes[node_id].shape:
                raise ShapeError(
                    f"Input '{name}' expects shape {self.nodes[node_id].shape}, got {tuple(array.shape)}"
                )
            if self.checked and not np.all(np.isfinite(array)):
                raise NonFiniteError(f"Input '{name}' contains NaN or Inf")
            self._values[node_id] = array
        self._bound = True

    def evaluate_upto(self, last: int) -> None:
        if not self._bound:
            raise ValueError("Graph has no bindings; call forward() first")
        values = self._values
        if len(values) < len(self.nodes):
            values.extend([None] * (len(self.nodes) - len(values)))
        for i in range(last + 1):
            if values[i] is None:
                node = self.nodes[i]
                values[i] = _FORWARD[node.op]([values[j] for j in node.inputs], node.attrs)

    def value(self, node_id: int) -> np.ndarray:
        self.evaluate_upto(node_id)
        return self._values[node_id]


# ---------------------------------------------------------------------------
# 4) Public operations
# ---------------------------------------------------------------------------
def forward(graph: Graph, bindings: Mapping[Union[str, int], Binding], output: Optional[int] = None) -> Tensor:
    """Bind inputs, evaluate up to ``output`` (default: graph.output, else last node), cache intermediates."""
    if output is None:
        output = graph.output if graph.output is not None else len(graph) - 1
    graph._check_id(output)
    graph.bind(bindings)
    graph.evaluate_upto(output)
    return Tensor.wrap(graph._values[output])


def gradient_nodes(graph: Graph, output: int, wrt: Iterable[int]) -> Dict[int, int]:
    """
    Append the reverse-mode adjoint of ``output`` w.r.t. ``wrt`` to the graph.

    Returns node ids holding each gradient. The new nodes are regular graph
    nodes, so they can be fed into further ops and differentiated again.
    Repeated requests for the same (output, wrt) reuse the nodes already built.
    """
    graph._check_id(output)
    wrt = tuple(wrt)
    for w in wrt:
        graph._check_id(w)
    if graph.shape_of(output) != ():
        raise ShapeError(f"Gradient needs a scalar output, node {output} has shape {graph.shape_of(output)}")

    key = (output, wrt)
    if key in graph._grad_cache:
        return graph._grad_cache[key]

    wrt_set = set(wrt)
    depends = [False] * (output + 1)
    for i in range(output + 1):
        depends[i] = i in wrt_set or any(depends[j] for j in graph.nodes[i].inputs)

    adjoint: Dict[int, int] = {}
    if depends[output]:
        adjoint[output] = graph.constant(1.0)
    for i in range(output, -1, -1):
        if i not in adjoint:
            continue
        node = graph.nodes[i]
        need = [depends[j] for j in node.inputs]
        if not any(need):
            continue
        for j, contribution in zip(node.inputs, graph._vjp(i, adjoint[i], need)):
            if contribution is None:
                continue
            adjoint[j] = contribution if j not in adjoint else graph.add(adjoint[j], contribution)

    result = {
        w: adjoint[w] if w in adjoint else graph.constant(np.zeros(graph.shape_of(w)))
        for w in wrt
    }
    graph._grad_cache[key] = result
    logger.debug("Built gradient of node %d w.r.t. %d inputs; graph now has %d nodes",
                 output, len(wrt), len(graph))
    return result


def grad(graph: Graph, output: int, wrt: Iterable[int]) -> GradientResult:
    """Exact gradients of scalar ``output`` at the bindings of the last forward() call."""
    ids = gradient_nodes(graph, output, wrt)
    if ids:
        graph.evaluate_upto(max(ids.values()))
    return GradientResult({w: Tensor.wrap(graph._values[node_id]) for w, node_id in ids.items()})


def finite_diff(gfn: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of scalar ``gfn`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"finite_diff step must be positive, got {h}")
    base = np.array(x.array, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    estimate = np.zeros_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = float(gfn(Tensor(base, checked=False)))
        flat[i] = original - h
        lower = float(gfn(Tensor(base, checked=False)))
        flat[i] = original
        estimate[i] = (upper - lower) / (2.0 * h)
    return Tensor(estimate.reshape(base.shape), checked=False)
