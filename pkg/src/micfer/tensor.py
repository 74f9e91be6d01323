"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation is a named entry in ``PRIMITIVES``: a forward
function returning ``(output, ctx)`` and a vector-Jacobian function mapping the
output cotangent back to one cotangent per input. Operations applied while a
:class:`Graph` is active are appended to it; :func:`backward` walks that list
in reverse.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, dict]]
    vjp: Callable[[np.ndarray, dict], tuple[np.ndarray | None, ...]]


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward, vjp) -> Primitive:
    prim = Primitive(name, forward, vjp)
    PRIMITIVES[name] = prim
    return prim


@dataclass
class Node:
    primitive: Primitive
    inputs: tuple["Tensor", ...]
    ctx: dict


@dataclass
class Graph:
    """Append-only tape; inputs always precede the nodes that consume them."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


_local = threading.local()


def active_graph() -> Graph | None:
    return getattr(_local, "graph", None)


@contextmanager
def recording(graph: Graph | None = None):
    """Record primitive applications on ``graph`` (a fresh one by default)."""
    g = Graph() if graph is None else graph
    prev = active_graph()
    _local.graph = g
    try:
        yield g
    finally:
        _local.graph = prev


@contextmanager
def no_grad():
    prev = active_graph()
    _local.graph = None
    try:
        yield
    finally:
        _local.graph = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.graph: Graph | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def tracked(self, graph: Graph | None) -> bool:
        if graph is None:
            return False
        return self.requires_grad or (self.graph is graph and self.node_id is not None)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar; every method routes through apply_primitive
    def __add__(self, other):
        return apply_primitive("add", [self, as_tensor(other)])

    def __radd__(self, other):
        return apply_primitive("add", [as_tensor(other), self])

    def __sub__(self, other):
        return apply_primitive("subtract", [self, as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("subtract", [as_tensor(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("multiply", [self, as_tensor(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return apply_primitive("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, as_tensor(other)])

    def __getitem__(self, index):
        return apply_primitive("slice", [self], index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_primitive(name: str, inputs: list[Tensor], **attrs) -> Tensor:
    try:
        prim = PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}") from None
    arrays = [t.data for t in inputs]
    out, ctx = prim.forward(*arrays, **attrs)
    result = Tensor.__new__(Tensor)
    result.data = np.asarray(out, dtype=np.float64)
    result.requires_grad = False
    result.name = None
    result.grad = None
    result.node_id = None
    result.graph = None
    g = active_graph()
    if g is not None and any(t.tracked(g) for t in inputs):
        ctx["needs"] = tuple(t.tracked(g) for t in inputs)
        result.node_id = g.record(Node(prim, tuple(inputs), ctx))
        result.graph = g
    return result


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss``.

    Leaf tensors reached from ``loss`` get their gradient accumulated into
    ``.grad``. Any tensor listed in ``params`` that the loss does not reach maps
    to zeros in the returned dict.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    return backward_from(loss, np.ones_like(loss.data), params)


def backward_from(out: Tensor, seed: np.ndarray, params: Iterable[Tensor] | None = None
                  ) -> dict[Tensor, np.ndarray]:
    """Propagate cotangent ``seed`` from ``out`` back to the leaves."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {out.shape}")
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    def to_leaf(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in leaf_grads:
            leaf_grads[key] = leaf_grads[key] + g
        else:
            leaf_grads[key] = g
            leaves[key] = t

    if out.node_id is None:
        if out.requires_grad:
            to_leaf(out, seed)
    else:
        graph = out.graph
        pending: dict[int, np.ndarray] = {out.node_id: seed}
        for nid in range(out.node_id, -1, -1):
            g_out = pending.pop(nid, None)
            if g_out is None:
                continue
            node = graph.nodes[nid]
            in_grads = node.primitive.vjp(g_out, node.ctx)
            for t, g_in in zip(node.inputs, in_grads):
                if g_in is None:
                    continue
                if t.graph is graph and t.node_id is not None:
                    prev = pending.get(t.node_id)
                    pending[t.node_id] = g_in if prev is None else prev + g_in
                elif t.requires_grad:
                    to_leaf(t, g_in)

    result: dict[Tensor, np.ndarray] = {}
    for key, g in leaf_grads.items():
        t = leaves[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive catalog


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible extents {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    _broadcast_shape("add", a, b)
    return a + b, {"sa": a.shape, "sb": b.shape}


def _add_vjp(g, ctx):
    return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])


def _sub_fwd(a, b):
    _broadcast_shape("subtract", a, b)
    return a - b, {"sa": a.shape, "sb": b.shape}


def _sub_vjp(g, ctx):
    return _unbroadcast(g, ctx["sa"]), -_unbroadcast(g, ctx["sb"])


def _mul_fwd(a, b):
    _broadcast_shape("multiply", a, b)
    return a * b, {"a": a, "b": b}


def _mul_vjp(g, ctx):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, factor):
    return a * factor, {"factor": factor}


def _scale_vjp(g, ctx):
    return (g * ctx["factor"],)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} and {b.shape}")
    return a @ b, {"a": a, "b": b}


def _matmul_vjp(g, ctx):
    needs = ctx.get("needs", (True, True))
    return (g @ ctx["b"].T if needs[0] else None,
            ctx["a"].T @ g if needs[1] else None)


def _conv2d_fwd(x, w, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible extents {x.shape} and {w.shape}")
    f, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, _, ho, wo = win.shape[:4]
    # im2col rows are (n, ho, wo), columns (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = (cols @ w.reshape(f, -1).T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    ctx = {"cols": cols, "w": w, "pshape": xp.shape, "oshape": (n, ho, wo),
           "stride": stride, "padding": padding}
    return out, ctx


def _conv2d_vjp(g, ctx):
    cols, w, stride, padding = ctx["cols"], ctx["w"], ctx["stride"], ctx["padding"]
    f, c, kh, kw = w.shape
    n, ho, wo = ctx["oshape"]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (g2.T @ cols).reshape(w.shape)
    if not ctx.get("needs", (True, True))[0]:
        return None, dw
    _, _, hp, wp = ctx["pshape"]
    gm = g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)
    # channel-major col2im: one matmul, then kh*kw strided adds of contiguous blocks
    dcols = (np.ascontiguousarray(w.reshape(f, -1).T) @ gm).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dxp = dxp.transpose(1, 0, 2, 3)
    if padding:
        dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
    return dxp, dw


def _relu_fwd(a):
    mask = (a > 0).astype(np.float64)
    return a * mask, {"mask": mask}


def _relu_vjp(g, ctx):
    return (g * ctx["mask"],)


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, {"y": y}


def _tanh_vjp(g, ctx):
    return (g * (1.0 - ctx["y"] ** 2),)


def _sigmoid_fwd(a):
    y = np.empty_like(a)
    pos = a >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    y[~pos] = ea / (1.0 + ea)
    return y, {"y": y}


def _sigmoid_vjp(g, ctx):
    y = ctx["y"]
    return (g * y * (1.0 - y),)


def _exp_fwd(a):
    y = np.exp(a)
    return y, {"y": y}


def _exp_vjp(g, ctx):
    return (g * ctx["y"],)


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError(f"log: non-positive input (min {a.min():.6g})")
    return np.log(a), {"a": a}


def _log_vjp(g, ctx):
    return (g / ctx["a"],)


def _clamp_min_fwd(a, floor):
    mask = ~(a <= floor)  # NaN passes through instead of being floored away
    return np.where(mask, a, floor), {"mask": mask}


def _clamp_min_vjp(g, ctx):
    return (g * ctx["mask"],)


def _logsumexp_fwd(a):
    if a.ndim == 0:
        raise ShapeError("logsumexp: needs at least one axis")
    m = a.max(axis=-1, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    return out, {"p": e / s}


def _logsumexp_vjp(g, ctx):
    return (g[..., None] * ctx["p"],)


def _softmax_fwd(a):
    if a.ndim == 0:
        raise ShapeError("softmax: needs at least one axis")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, {"y": y}


def _softmax_vjp(g, ctx):
    y = ctx["y"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _reduce_fwd(a, axis, mean):
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{'mean' if mean else 'sum'}: axis {axis} out of range for {a.shape}")
    out = a.mean(axis=axis) if mean else a.sum(axis=axis)
    count = a.size if axis is None else a.shape[axis]
    return out, {"shape": a.shape, "axis": axis, "scale": 1.0 / count if mean else 1.0}


def _reduce_vjp(g, ctx):
    if ctx["axis"] is not None:
        g = np.expand_dims(g, ctx["axis"])
    return (np.broadcast_to(g * ctx["scale"], ctx["shape"]).copy(),)


def _concat_fwd(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible extents {[a.shape for a in arrays]} on axis {axis}") from None
    sizes = [a.shape[axis] for a in arrays]
    return out, {"splits": np.cumsum(sizes)[:-1], "axis": axis}


def _concat_vjp(g, ctx):
    return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


def _slice_fwd(a, index):
    try:
        out = a[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for extents {a.shape}") from None
    return np.array(out), {"shape": a.shape, "index": index}


def _slice_vjp(g, ctx):
    full = np.zeros(ctx["shape"])
    if _has_advanced(ctx["index"]):
        np.add.at(full, ctx["index"], g)
    else:
        full[ctx["index"]] = g
    return (full,)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _reshape_fwd(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return out, {"shape": a.shape}


def _reshape_vjp(g, ctx):
    return (g.reshape(ctx["shape"]),)


def _sqnorm_fwd(a):
    return np.sum(a * a), {"a": a}


def _sqnorm_vjp(g, ctx):
    return (2.0 * g * ctx["a"],)


register_primitive("add", _add_fwd, _add_vjp)
register_primitive("subtract", _sub_fwd, _sub_vjp)
register_primitive("multiply", _mul_fwd, _mul_vjp)
register_primitive("scale", _scale_fwd, _scale_vjp)
register_primitive("matmul", _matmul_fwd, _matmul_vjp)
register_primitive("conv2d", _conv2d_fwd, _conv2d_vjp)
register_primitive("relu", _relu_fwd, _relu_vjp)
register_primitive("tanh", _tanh_fwd, _tanh_vjp)
register_primitive("sigmoid", _sigmoid_fwd, _sigmoid_vjp)
register_primitive("exp", _exp_fwd, _exp_vjp)
register_primitive("log", _log_fwd, _log_vjp)
register_primitive("clamp_min", _clamp_min_fwd, _clamp_min_vjp)
register_primitive("logsumexp", _logsumexp_fwd, _logsumexp_vjp)
register_primitive("softmax", _softmax_fwd, _softmax_vjp)
register_primitive("mean", lambda a, axis=None: _reduce_fwd(a, axis, True), _reduce_vjp)
register_primitive("sum", lambda a, axis=None: _reduce_fwd(a, axis, False), _reduce_vjp)
register_primitive("concat", _concat_fwd, _concat_vjp)
register_primitive("slice", _slice_fwd, _slice_vjp)
register_primitive("reshape", _reshape_fwd, _reshape_vjp)
register_primitive("sqnorm", _sqnorm_fwd, _sqnorm_vjp)


# functional front-end

def add(a, b): return apply_primitive("add", [as_tensor(a), as_tensor(b)])
def subtract(a, b): return apply_primitive("subtract", [as_tensor(a), as_tensor(b)])
def multiply(a, b): return apply_primitive("multiply", [as_tensor(a), as_tensor(b)])
def scale(a, factor: float): return apply_primitive("scale", [a], factor=float(factor))
def matmul(a, b): return apply_primitive("matmul", [as_tensor(a), as_tensor(b)])
def relu(a): return apply_primitive("relu", [a])
def tanh(a): return apply_primitive("tanh", [a])
def sigmoid(a): return apply_primitive("sigmoid", [a])
def exp(a): return apply_primitive("exp", [a])
def log(a): return apply_primitive("log", [a])
def clamp_min(a, floor: float): return apply_primitive("clamp_min", [a], floor=float(floor))
def logsumexp(a): return apply_primitive("logsumexp", [a])
def softmax(a): return apply_primitive("softmax", [a])
def mean(a, axis: int | None = None): return apply_primitive("mean", [a], axis=axis)
def sum(a, axis: int | None = None): return apply_primitive("sum", [a], axis=axis)  # noqa: A001
def reshape(a, shape): return apply_primitive("reshape", [a], shape=tuple(shape))
def sqnorm(a): return apply_primitive("sqnorm", [a])


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", [as_tensor(t) for t in tensors], axis=axis)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_primitive("conv2d", [as_tensor(x), w], stride=stride, padding=padding)
