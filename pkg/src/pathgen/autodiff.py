"""Minimal dense reverse-mode automatic differentiation on numpy arrays.

Every primitive lives in ``OPS`` as a pair of pure functions: a forward that
maps input arrays to an output array and a backward that maps the output
cotangent to input cotangents.  Calling an op on :class:`Tensor` objects runs
the forward eagerly and appends a node to the active :class:`ExprGraph`, so a
model written as ordinary Python produces a topologically ordered record that
can be replayed (:func:`evaluate`) or differentiated (:func:`gradient`).
"""
from __future__ import annotations

import contextlib
import math
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tensor", "ExprGraph", "OPS", "NonFiniteError", "ShapeError",
    "trace", "evaluate", "gradient", "value_and_grad", "precision",
    "AdamState", "adam_init", "adam_step", "finite_difference_check",
    "FDReport",
]

# Reductions over more elements than this accumulate in float64.
WIDE_REDUCTION = 4096

_dtype = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (float64 for gradient checks)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def default_dtype():
    return _dtype


def _check_finite(name, arr):
    # a sum is non-finite iff some element is (barring float overflow)
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite values produced by '{name}'")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _reduce(fn, x, axis, keepdims):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if n > WIDE_REDUCTION and x.dtype == np.float32:
        return fn(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    return fn(x, axis=axis, keepdims=keepdims)


def _expand(grad, shape, axis, keepdims):
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    backward: Callable  # (g, out, *inputs, **attrs) -> tuple of input grads


OPS: dict[str, Op] = {}


def _register(name, forward, backward):
    OPS[name] = Op(name, forward, backward)


def _matmul_bwd(g, out, a, b):
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold the batch axes into one 2-D product
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return g @ b.T, gb
    if a.ndim == 2 and b.ndim > 2:
        ga = (g @ _swap(b)).reshape(-1, *a.shape).sum(axis=0)
        return ga, _unbroadcast(a.T @ g, b.shape)
    return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


_register("matmul", _matmul_fwd, _matmul_bwd)
_register("add", np.add,
          lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", np.subtract,
          lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register("mul", np.multiply,
          lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
_register("scale", lambda a, c: a * a.dtype.type(c),
          lambda g, out, a, c: (g * a.dtype.type(c),))


def _elu_fwd(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0)))


_register("elu", _elu_fwd, lambda g, out, a: (g * np.where(a > 0, 1, out + 1),))


def _sigmoid_fwd(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)


_register("sigmoid", _sigmoid_fwd, lambda g, out, a: (g * out * (1 - out),))
_register("tanh", np.tanh, lambda g, out, a: (g * (1 - out * out),))
_register("log", np.log, lambda g, out, a: (g / a,))
_register("exp", np.exp, lambda g, out, a: (g * out,))


def _softmax_fwd(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


_register("softmax", _softmax_fwd, _softmax_bwd)


def _layer_norm_fwd(a, eps=1e-5):
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def _layer_norm_bwd(g, out, a, eps=1e-5):
    var = a.var(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * out).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - out * gxm),)


_register("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


def _clip_bwd(g, out, a, lo, hi):
    return (g * ((a >= lo) & (a <= hi)),)


_register("clip", lambda a, lo, hi: np.clip(a, lo, hi), _clip_bwd)


def _concat_bwd(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_bwd)


def _slice_fwd(a, start, stop, axis):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _slice_bwd(g, out, a, start, stop, axis):
    full = np.zeros_like(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    full[tuple(idx)] = g
    return (full,)


_register("slice", _slice_fwd, _slice_bwd)
_register("sum", lambda a, axis=None, keepdims=False: _reduce(np.sum, a, axis, keepdims),
          lambda g, out, a, axis=None, keepdims=False: (_expand(g, a.shape, axis, keepdims).copy(),))


def _mean_bwd(g, out, a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return (_expand(g, a.shape, axis, keepdims) / a.dtype.type(n),)


_register("mean", lambda a, axis=None, keepdims=False: _reduce(np.mean, a, axis, keepdims), _mean_bwd)
_register("sum_of_squares", lambda a: _reduce(np.sum, a * a, None, False),
          lambda g, out, a: (2 * g * a,))
_register("reshape", lambda a, shape: a.reshape(shape),
          lambda g, out, a, shape: (g.reshape(a.shape),))
_register("transpose", lambda a, axes: a.transpose(axes),
          lambda g, out, a, axes: (g.transpose(np.argsort(axes)),))


# ---------------------------------------------------------------------------
# tensors and graph recording
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    out: int


@dataclass
class ExprGraph:
    """Topologically ordered op record.

    Ids index ``values``; leaves (parameters, inputs, constants) have no node.
    """
    nodes: list[Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, int] = field(default_factory=dict)
    output: int | None = None

    def leaf(self, arr):
        self.values.append(arr)
        return len(self.values) - 1

    @property
    def output_value(self):
        return self.values[self.output]


_active: list[ExprGraph] = []
_ids = itertools.count()


class Tensor:
    """Array value tied to a slot in the recording graph (if any)."""

    __array_priority__ = 100

    def __init__(self, data, graph=None, slot=None):
        self.data = np.asarray(data, dtype=_dtype) if not isinstance(data, np.ndarray) \
            or data.dtype != _dtype else data
        self.graph = graph
        self.slot = slot

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    # operator sugar
    def __add__(self, o): return apply("add", self, o)
    def __radd__(self, o): return apply("add", o, self)
    def __sub__(self, o): return apply("sub", self, o)
    def __rsub__(self, o): return apply("sub", o, self)
    def __mul__(self, o):
        if np.isscalar(o):
            return apply("scale", self, c=float(o))
        return apply("mul", self, o)
    __rmul__ = __mul__
    def __neg__(self): return apply("scale", self, c=-1.0)
    def __truediv__(self, c): return apply("scale", self, c=1.0 / float(c))
    def __matmul__(self, o): return apply("matmul", self, o)
    def __rmatmul__(self, o): return apply("matmul", o, self)

    def __getitem__(self, idx):
        # only single-axis slices are differentiable
        if isinstance(idx, slice) and idx.step is None:
            return slice_(self, idx.start or 0, idx.stop if idx.stop is not None else self.shape[0], 0)
        raise TypeError("use slice_(t, start, stop, axis)")

    def sum(self, axis=None, keepdims=False): return apply("sum", self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return apply("mean", self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape): return apply("reshape", self, shape=tuple(shape))
    def transpose(self, *axes): return apply("transpose", self, axes=tuple(axes))


def _as_tensor(x, graph):
    if isinstance(x, Tensor):
        if graph is not None and x.graph is not graph:
            # value from outside the recording becomes a constant leaf
            return Tensor(x.data, graph, graph.leaf(x.data))
        return x
    arr = np.asarray(x, dtype=_dtype)
    return Tensor(arr, graph, graph.leaf(arr) if graph is not None else None)


def apply(name, *args, **attrs):
    op = OPS[name]
    graph = _active[-1] if _active else None
    ts = [_as_tensor(a, graph) for a in args]
    out = op.forward(*(t.data for t in ts), **attrs)
    if out.dtype != _dtype:
        out = out.astype(_dtype)
    _check_finite(name, out)
    if graph is None:
        return Tensor(out)
    slot = graph.leaf(out)
    graph.nodes.append(Node(name, tuple(t.slot for t in ts), attrs, slot))
    return Tensor(out, graph, slot)


# functional wrappers for the registered ops
def matmul(a, b): return apply("matmul", a, b)
def elu(a): return apply("elu", a)
def sigmoid(a): return apply("sigmoid", a)
def tanh(a): return apply("tanh", a)
def log(a): return apply("log", a)
def exp(a): return apply("exp", a)
def softmax(a): return apply("softmax", a)
def layer_norm(a, eps=1e-5): return apply("layer_norm", a, eps=eps)
def clip(a, lo, hi): return apply("clip", a, lo=lo, hi=hi)
def concat(xs, axis=-1): return apply("concat", *xs, axis=axis)
def slice_(a, start, stop, axis=-1): return apply("slice", a, start=start, stop=stop, axis=axis)
def sum_of_squares(a): return apply("sum_of_squares", a)


@contextlib.contextmanager
def recording():
    graph = ExprGraph()
    _active.append(graph)
    try:
        yield graph
    finally:
        _active.pop()


def trace(fn, params, inputs=None):
    """Run ``fn(params, inputs)`` on leaf tensors and return its graph.

    ``params`` and ``inputs`` are dicts of arrays.  ``fn`` receives dicts of
    :class:`Tensor` and must return a single Tensor.
    """
    inputs = inputs or {}
    with recording() as g:
        p = {}
        for k, v in params.items():
            arr = np.asarray(v, dtype=_dtype)
            g.params[k] = g.leaf(arr)
            p[k] = Tensor(arr, g, g.params[k])
        x = {}
        for k, v in inputs.items():
            arr = np.asarray(v, dtype=_dtype)
            g.inputs[k] = g.leaf(arr)
            x[k] = Tensor(arr, g, g.inputs[k])
        out = fn(p, x)
        out = _as_tensor(out, g)
        g.output = out.slot
    return g


def evaluate(graph, bindings=None, params=None):
    """Replay ``graph`` with new input (and optionally parameter) values."""
    bindings = bindings or {}
    params = params or {}
    values = list(graph.values)
    for name, slot in graph.inputs.items():
        if name not in bindings:
            raise KeyError(f"missing binding for input '{name}'")
    for src, table in ((bindings, graph.inputs), (params, graph.params)):
        for name, arr in src.items():
            slot = table[name]
            arr = np.asarray(arr, dtype=values[slot].dtype)
            if arr.shape != values[slot].shape:
                raise ShapeError(f"'{name}': expected {values[slot].shape}, got {arr.shape}")
            values[slot] = arr
    for node in graph.nodes:
        out = OPS[node.op].forward(*(values[i] for i in node.inputs), **node.attrs)
        out = out.astype(values[node.out].dtype, copy=False)
        _check_finite(node.op, out)
        values[node.out] = out
    replayed = ExprGraph(graph.nodes, values, graph.params, graph.inputs, graph.output)
    return replayed


def gradient(graph, wrt="params"):
    """Reverse pass from the scalar output; returns ``{param name: grad}``.

    ``wrt`` may be ``"params"``, ``"inputs"`` or ``"all"``.
    """
    out = graph.values[graph.output]
    if out.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {out.shape}")
    grads: dict[int, np.ndarray] = {graph.output: np.ones_like(out)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        ins = [graph.values[i] for i in node.inputs]
        parts = OPS[node.op].backward(g, graph.values[node.out], *ins, **node.attrs)
        for slot, part in zip(node.inputs, parts):
            if slot in grads:
                grads[slot] = grads[slot] + part
            else:
                grads[slot] = part
    names = {}
    if wrt in ("params", "all"):
        names.update(graph.params)
    if wrt in ("inputs", "all"):
        names.update(graph.inputs)
    result = {}
    for name, slot in names.items():
        g = grads.get(slot)
        g = np.zeros_like(graph.values[slot]) if g is None else np.asarray(g, graph.values[slot].dtype)
        _check_finite(f"grad[{name}]", g)
        result[name] = g
    return result


def value_and_grad(fn, params, inputs=None):
    g = trace(fn, params, inputs)
    return float(g.output_value), gradient(g)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def scheduled_lr(lr, epoch, epochs, schedule="constant"):
    """Per-epoch learning rate; "cosine" decays to 5% of ``lr`` at the last epoch."""
    if schedule == "constant":
        return lr
    if schedule == "cosine":
        frac = epoch / max(epochs - 1, 1)
        return lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def adam_init(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(lr, beta1, beta2, eps, 0,
                     {k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state):
    """In-place Adam update of ``params``; returns ``(params, state)``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"'{k}': grad {g.shape} vs param {p.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        _check_finite(f"adam[{k}]", upd)
        p -= upd.astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class FDReport:
    max_rel_error: float
    per_param: dict
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def rel_error(a, b):
    """Max-norm relative error, robust to all-zero gradients."""
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-10)
    return float(np.max(np.abs(a - b)) / denom)


def finite_difference_check(fn, params, inputs=None, h=1e-5, tolerance=1e-4,
                            wrt="params", max_entries=None, rng=None):
    """Compare analytic gradients of scalar ``fn`` to central differences.

    Runs in float64.  ``max_entries`` bounds how many coordinates per tensor
    are probed (chosen with ``rng``); ``None`` probes all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    inputs = inputs or {}
    with precision(np.float64):
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        graph = trace(fn, params, inputs)
        analytic = gradient(graph, wrt=wrt)
        per = {}
        for name, grad in analytic.items():
            src = params if name in params else inputs
            base = src[name]
            flat = np.arange(base.size)
            if max_entries is not None and base.size > max_entries:
                flat = rng.choice(base.size, max_entries, replace=False)
            num = np.zeros(len(flat))
            for j, i in enumerate(flat):
                orig = base.flat[i]
                base.flat[i] = orig + h
                up = float(evaluate(graph, inputs, params).output_value)
                base.flat[i] = orig - h
                dn = float(evaluate(graph, inputs, params).output_value)
                base.flat[i] = orig
                num[j] = (up - dn) / (2 * h)
            per[name] = rel_error(grad.ravel()[flat], num)
    worst = max(per.values()) if per else 0.0
    return FDReport(worst, per, tolerance)
