"""Reverse-mode differentiation over fp64 numpy arrays.

Every op is recorded on an explicit ComputeGraph (an append-only list of nodes, so
list order is already a topological order). A graph also counts model forward
passes and backward passes; these counters are the machine-independent cost
measure reported by the training loops (xFP = FP + 2 * BP).

Shapes are never broadcast implicitly. The only exceptions are a 1-D right operand
of ``add``/``multiply`` (row-wise bias or gain over the last axis) and a 2-D right
operand of ``matmul`` applied to every leading index of a batched left operand.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GraphError, NumericError, ShapeError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
GRAD_CHECK_FLOOR = 1e-8


class Tensor:
    """fp64 array plus an optional gradient of identical shape"""

    __slots__ = ("values", "grad", "requires_grad", "name", "node")

    def __init__(self, values: Any, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node: Optional["Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    index: int
    graph: "ComputeGraph"
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]] = field(repr=False)


# ---------------------------------------------------------------------------
# op implementations: forward(values..., **attrs) -> (output, backward closure)
# ---------------------------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _reduce_rows(g: np.ndarray, width: int) -> np.ndarray:
    return g.reshape(-1, width).sum(axis=0)


def _op_matmul(a: np.ndarray, b: np.ndarray):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    shared_weight = b.ndim == 2 and a.ndim > 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree, {a.shape} @ {b.shape}")
    out = np.matmul(a, b)

    def backward(g):
        ga = np.matmul(g, _swap(b))
        if shared_weight:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(_swap(a), g)
        return ga, gb

    return out, backward


def _row_operand(op: str, a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and not a row-wise operand")


def _op_add(a: np.ndarray, b: np.ndarray):
    row = _row_operand("add", a, b)

    def backward(g):
        return g, (_reduce_rows(g, b.shape[0]) if row else g)

    return a + b, backward


def _op_sub(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return a - b, lambda g: (g, -g)


def _op_multiply(a: np.ndarray, b: np.ndarray):
    row = _row_operand("multiply", a, b)

    def backward(g):
        gb = g * a
        return g * b, (_reduce_rows(gb, b.shape[0]) if row else gb)

    return a * b, backward


def _op_divide(a: np.ndarray, b: np.ndarray):
    if b.shape != () and b.shape != a.shape:
        raise ShapeError(f"divide: divisor must be a scalar or match {a.shape}, got {b.shape}")
    if np.any(b == 0.0):
        raise NumericError("divide: division by zero")
    out = a / b

    def backward(g):
        ga = g / b
        gb = -g * a / (b * b)
        return ga, (gb.sum() if b.shape == () else gb)

    return out, backward


def _op_scale(a: np.ndarray, factor: float):
    factor = float(factor)
    return a * factor, lambda g: (g * factor,)


def _op_tanh(a: np.ndarray):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _op_exp(a: np.ndarray):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _op_softmax(a: np.ndarray):
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, backward


def _op_log_softmax(a: np.ndarray):
    shifted = a - a.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return out, backward


def _op_log(a: np.ndarray, floor: float | None = None):
    if floor is None:
        if np.any(a <= 0.0):
            raise NumericError("log: non-positive input without a floor")
        clamped = a
        live = None
    else:
        live = a > floor
        clamped = np.where(live, a, floor)
    out = np.log(clamped)

    def backward(g):
        gx = g / clamped
        if live is not None:
            gx = np.where(live, gx, 0.0)
        return (gx,)

    return out, backward


def _op_sum(a: np.ndarray, axis: int | None = None):
    out = a.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return np.asarray(out, dtype=np.float64), backward


def _op_mean(a: np.ndarray, axis: int | None = None):
    count = a.size if axis is None else a.shape[axis]
    out = a.sum(axis=axis) / count

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / count,)

    return np.asarray(out, dtype=np.float64), backward


def _op_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered / std
    out = xhat * gain + bias

    def backward(g):
        gxhat = g * gain
        gx = (gxhat - gxhat.mean(axis=-1, keepdims=True)
              - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) / std
        return gx, _reduce_rows(g * xhat, width), _reduce_rows(g, width)

    return out, backward


def _op_embedding(table: np.ndarray, ids: np.ndarray):
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}")

    def backward(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return table[ids], backward


def _op_concat(*parts: np.ndarray, axis: int = 0):
    ref = parts[0]
    for p in parts[1:]:
        if p.ndim != ref.ndim or any(p.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis % ref.ndim):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} along axis {axis}")
    out = np.concatenate(parts, axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, backward


def _op_transpose(a: np.ndarray):
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2-D input, got {a.shape}")
    return _swap(a).copy(), lambda g: (_swap(g).copy(),)


def _op_take(a: np.ndarray, axis: int, index: int):
    if not -a.shape[axis] <= index < a.shape[axis]:
        raise ShapeError(f"take: index {index} outside axis {axis} of {a.shape}")
    out = np.take(a, index, axis=axis)

    def backward(g):
        ga = np.zeros_like(a)
        slicer = [slice(None)] * a.ndim
        slicer[axis] = index
        ga[tuple(slicer)] = g
        return (ga,)

    return out, backward


def _op_reshape(a: np.ndarray, shape: Tuple[int, ...]):
    out = a.reshape(shape)
    if out.size != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return out.copy(), lambda g: (g.reshape(a.shape),)


OPS: Dict[str, Callable[..., Any]] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "sub": _op_sub,
    "multiply": _op_multiply,
    "divide": _op_divide,
    "scale": _op_scale,
    "tanh": _op_tanh,
    "exp": _op_exp,
    "softmax": _op_softmax,
    "log_softmax": _op_log_softmax,
    "log": _op_log,
    "sum": _op_sum,
    "mean": _op_mean,
    "layer_norm": _op_layer_norm,
    "embedding": _op_embedding,
    "concat": _op_concat,
    "transpose": _op_transpose,
    "take": _op_take,
    "reshape": _op_reshape,
}


class ComputeGraph:
    """Append-only record of ops plus forward/backward pass counters"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.forward_count = 0
        self.backward_count = 0
        self._in_pass = False

    @contextmanager
    def forward_pass(self):
        """Marks one full model forward pass for cost accounting"""
        if self._in_pass:
            raise GraphError("forward passes cannot be nested")
        self._in_pass = True
        try:
            yield self
        finally:
            self._in_pass = False
        self.forward_count += 1

    def apply(self, op: str, *inputs: Tensor, **attrs: Any) -> Tensor:
        if op not in OPS:
            raise GraphError(f"Unknown op: {op}")
        for t in inputs:
            if not isinstance(t, Tensor):
                raise GraphError(f"{op}: inputs must be Tensors, got {type(t).__name__}")
        out_values, backward_fn = OPS[op](*(t.values for t in inputs), **attrs)
        if not np.all(np.isfinite(out_values)):
            raise NumericError(f"{op}: non-finite output for input shapes {[t.shape for t in inputs]}")
        out = Tensor(out_values, requires_grad=any(t.requires_grad for t in inputs))
        out.node = Node(op, tuple(inputs), out, len(self.nodes), self, backward_fn)
        self.nodes.append(out.node)
        return out

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> None:
        """Accumulates dLoss/dLeaf into ``grad`` of every reachable leaf (or only ``wrt``)"""
        if not self.nodes or loss.node is None or loss.node.graph is not self:
            raise GraphError("backward called before a forward on this graph")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = None if wrt is None else {id(t) for t in wrt}
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: Dict[int, Tuple[Tensor, np.ndarray]] = {}
        for node in reversed(self.nodes[:loss.node.index + 1]):
            g = pending.pop(id(node.output), None)
            if g is None or not node.output.requires_grad:
                continue
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t.node is None:
                    if targets is not None and key not in targets:
                        continue
                    if key in leaves:
                        leaves[key] = (t, leaves[key][1] + gi)
                    else:
                        leaves[key] = (t, np.array(gi, dtype=np.float64))
                else:
                    pending[key] = pending[key] + gi if key in pending else gi
        for t, g in leaves.values():
            g = g.reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.backward_count += 1

    # thin op helpers so model code reads as arithmetic
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("matmul", a, b)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("add", a, b)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("sub", a, b)

    def multiply(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("multiply", a, b)

    def divide(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("divide", a, b)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.apply("scale", a, factor=factor)

    def tanh(self, a: Tensor) -> Tensor:
        return self.apply("tanh", a)

    def softmax(self, a: Tensor) -> Tensor:
        return self.apply("softmax", a)

    def log_softmax(self, a: Tensor) -> Tensor:
        return self.apply("log_softmax", a)

    def log(self, a: Tensor, floor: float | None = None) -> Tensor:
        return self.apply("log", a, floor=floor)

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        return self.apply("sum", a, axis=axis)

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        return self.apply("mean", a, axis=axis)

    def layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
        return self.apply("layer_norm", x, gain, bias, eps=eps)

    def embedding(self, table: Tensor, ids: np.ndarray) -> Tensor:
        return self.apply("embedding", table, ids=ids)

    def concat(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        return self.apply("concat", *parts, axis=axis)

    def transpose(self, a: Tensor) -> Tensor:
        return self.apply("transpose", a)

    def take(self, a: Tensor, axis: int, index: int) -> Tensor:
        return self.apply("take", a, axis=axis, index=index)

    def reshape(self, a: Tensor, shape: Tuple[int, ...]) -> Tensor:
        return self.apply("reshape", a, shape=tuple(shape))


def forward_op(graph: ComputeGraph, op: str, *inputs: Tensor, **attrs: Any) -> Tensor:
    return graph.apply(op, *inputs, **attrs)


def backward(graph: ComputeGraph, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> None:
    graph.backward(loss, wrt)


def pass_counters(graph: ComputeGraph) -> Tuple[int, int, int]:
    """(forward_count, backward_count, xfp) with xfp = FP + 2 * BP"""
    return graph.forward_count, graph.backward_count, graph.forward_count + 2 * graph.backward_count


@dataclass
class CostCounter:
    """Pass totals accumulated over many training steps"""

    fp: int = 0
    bp: int = 0

    @property
    def xfp(self) -> int:
        return self.fp + 2 * self.bp

    def add_graph(self, graph: ComputeGraph) -> None:
        self.fp += graph.forward_count
        self.bp += graph.backward_count

    def as_dict(self) -> Dict[str, int]:
        return {"fp_total": self.fp, "bp_total": self.bp, "xfp_total": self.xfp}


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(GRAD_CHECK_FLOOR, abs(a), abs(b))


def check_gradients(build_loss: Callable[[ComputeGraph], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``build_loss`` must build a scalar loss on the graph it is given and must not
    mutate any state between calls.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    for p in params:
        p.zero_grad()
    graph = ComputeGraph()
    loss = build_loss(graph)
    graph.backward(loss, wrt=params)
    analytic = [p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.size) for p in params]

    def evaluate() -> float:
        value = build_loss(ComputeGraph()).item()
        if not np.isfinite(value):
            raise NumericError("non-finite loss at a perturbed point")
        return value

    worst = 0.0
    for p, grad in zip(params, analytic):
        for i in range(p.size):
            idx = np.unravel_index(i, p.shape)
            original = p.values[idx]
            p.values[idx] = original + step
            x_plus = p.values[idx]
            f_plus = evaluate()
            p.values[idx] = original - step
            x_minus = p.values[idx]
            f_minus = evaluate()
            p.values[idx] = original
            # divide by the step actually taken, not the requested one
            numeric = (f_plus - f_minus) / (x_plus - x_minus)
            worst = max(worst, _relative_error(float(grad[i]), numeric))
    for p in params:
        p.zero_grad()
    logger.debug("gradient check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
