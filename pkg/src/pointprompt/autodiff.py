"""Dense-tensor reverse-mode automatic differentiation.

Tensors wrap row-major numpy buffers (float32 or float64). Graphs are built
eagerly by `forward` from a fixed operator vocabulary (`OpKind`); `backward`
differentiates a scalar loss once per call, visiting each node exactly once in
topological order. Every operator has a registered forward and backward rule,
and `finite_diff_check` verifies any of them against central differences.

A graph and its tensors are confined to the thread that builds them. Tensors
that only carry values (no producer, requires_grad=False) are immutable by
convention and safe to share read-only.
"""

from __future__ import annotations

import enum
import math

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_ALLOWED_DTYPES = (F32, F64)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeMismatchError(ValueError):
    """Input shapes invalid for an operator; message names the op and dims."""


class DtypeMismatchError(TypeError):
    """Inputs disagree on dtype, or dtype is not f32/f64."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar loss or a graph with no trainable leaf."""


class OpKind(enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    MUL = "mul"
    SCALE = "scale"
    CONCAT = "concat"
    SLICE = "slice"
    GATHER = "gather"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    RELU = "relu"
    GELU = "gelu"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    MAX_REDUCE = "max_reduce"
    TOPK_REDUCE = "topk_reduce"
    MEAN_REDUCE = "mean_reduce"
    CROSS_ENTROPY_WITH_LOGITS = "cross_entropy_with_logits"
    SQUARED_DISTANCE_MATRIX = "squared_distance_matrix"


class OpNode:
    """Record of one applied operator; links an output tensor to its inputs."""

    __slots__ = ("kind", "inputs", "attrs", "ctx")

    def __init__(self, kind, inputs, attrs, ctx):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.ctx = ctx


class Tensor:
    """Value buffer plus optional gradient slot and producer node.

    Leaves (producer is None) with requires_grad=True accumulate into `grad`
    across backward calls; everything else never stores a gradient. The
    producer links form a DAG by construction.
    """

    __slots__ = ("value", "grad", "requires_grad", "producer")

    def __init__(self, value: np.ndarray, requires_grad: bool = False,
                 producer: OpNode | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.producer = producer

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, "
                f"requires_grad={self.requires_grad})")


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a leaf tensor (row-major, f32/f64 only)."""
    if dtype is not None and np.dtype(dtype) not in _ALLOWED_DTYPES:
        raise DtypeMismatchError(f"unsupported dtype {dtype}; use f32 or f64")
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float64)
    return Tensor(np.ascontiguousarray(arr), requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=False)


# ---------------------------------------------------------------------------
# shared helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape))
                 if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int, kind: OpKind) -> int:
    a = axis + ndim if axis < 0 else axis
    if not 0 <= a < ndim:
        raise ShapeMismatchError(f"{kind.value}: axis {axis} out of range for ndim {ndim}")
    return a


def _require(cond: bool, kind: OpKind, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(f"{kind.value}: {msg}")


# ---------------------------------------------------------------------------
# forward rules: (values, attrs) -> (out_value, ctx)
# backward rules: (g, values, out_value, ctx, attrs, needs) -> list of grads

def _fwd_matmul(vals, attrs):
    a, b = vals
    _require(a.ndim >= 2 and b.ndim >= 2, OpKind.MATMUL,
             f"needs ndim >= 2, got {a.shape} and {b.shape}")
    _require(a.shape[-1] == b.shape[-2], OpKind.MATMUL,
             f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(
            f"matmul: leading dims not broadcastable: {a.shape} @ {b.shape}") from None
    return a @ b, None


def _bwd_matmul(g, vals, out, ctx, attrs, needs):
    a, b = vals
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape)
    if needs[1]:
        if b.ndim == 2 and a.ndim > 2:
            # broadcast weight: one flat GEMM instead of many tiny batched ones
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape)
    return [ga, gb]


def _fwd_add(vals, attrs):
    a, b = vals
    try:
        out = a + b
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return out, None


def _bwd_add(g, vals, out, ctx, attrs, needs):
    a, b = vals
    return [_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None]


def _fwd_mul(vals, attrs):
    a, b = vals
    try:
        out = a * b
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return out, None


def _bwd_mul(g, vals, out, ctx, attrs, needs):
    a, b = vals
    return [_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None]


def _fwd_scale(vals, attrs):
    (a,) = vals
    return a * a.dtype.type(attrs["factor"]), None


def _bwd_scale(g, vals, out, ctx, attrs, needs):
    return [g * vals[0].dtype.type(attrs["factor"])]


def _fwd_concat(vals, attrs):
    axis = _norm_axis(attrs["axis"], vals[0].ndim, OpKind.CONCAT)
    base = vals[0].shape
    for v in vals[1:]:
        _require(v.ndim == len(base), OpKind.CONCAT, f"rank mismatch {base} vs {v.shape}")
        _require(all(v.shape[i] == base[i] for i in range(len(base)) if i != axis),
                 OpKind.CONCAT, f"off-axis dims differ: {base} vs {v.shape}")
    return np.concatenate(vals, axis=axis), axis


def _bwd_concat(g, vals, out, ctx, attrs, needs):
    axis = ctx
    grads = []
    start = 0
    for v, need in zip(vals, needs):
        stop = start + v.shape[axis]
        if need:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            grads.append(g[tuple(idx)])
        else:
            grads.append(None)
        start = stop
    return grads


def _fwd_slice(vals, attrs):
    (a,) = vals
    axis = _norm_axis(attrs["axis"], a.ndim, OpKind.SLICE)
    start, stop = attrs["start"], attrs["stop"]
    _require(0 <= start < stop <= a.shape[axis], OpKind.SLICE,
             f"bounds [{start}, {stop}) invalid for dim {a.shape[axis]} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)].copy(), axis


def _bwd_slice(g, vals, out, ctx, attrs, needs):
    a = vals[0]
    axis = ctx
    ga = np.zeros_like(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(attrs["start"], attrs["stop"])
    ga[tuple(idx)] = g
    return [ga]


def _fwd_gather(vals, attrs):
    (a,) = vals
    idx = np.asarray(attrs["indices"])
    _require(a.ndim >= 1, OpKind.GATHER, "operand must have at least one axis")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatchError(
            f"gather: index out of range for leading dim {a.shape[0]}")
    return a[idx], idx


def _bwd_gather(g, vals, out, ctx, attrs, needs):
    ga = np.zeros_like(vals[0])
    idx = ctx.reshape(-1)
    if idx.size == 0:
        return [ga]
    rows = g.reshape(idx.size, -1)
    # segment-sum via stable sort + reduceat (much faster than np.add.at)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate([[0], boundaries])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    ga.reshape(ga.shape[0], -1)[sorted_idx[starts]] += sums
    return [ga]


def _fwd_transpose(vals, attrs):
    (a,) = vals
    perm = tuple(attrs["perm"])
    _require(sorted(perm) == list(range(a.ndim)), OpKind.TRANSPOSE,
             f"perm {perm} is not a permutation of axes for shape {a.shape}")
    return np.ascontiguousarray(np.transpose(a, perm)), perm


def _bwd_transpose(g, vals, out, ctx, attrs, needs):
    inv = np.argsort(ctx)
    return [np.ascontiguousarray(np.transpose(g, inv))]


def _fwd_reshape(vals, attrs):
    (a,) = vals
    shape = tuple(attrs["shape"])
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}") from None
    return np.ascontiguousarray(out), a.shape


def _bwd_reshape(g, vals, out, ctx, attrs, needs):
    return [np.ascontiguousarray(g.reshape(ctx))]


def _fwd_relu(vals, attrs):
    (a,) = vals
    return np.maximum(a, 0), None


def _bwd_relu(g, vals, out, ctx, attrs, needs):
    return [g * (vals[0] > 0)]


def _fwd_gelu(vals, attrs):
    # canonical tanh form: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi)
    (a,) = vals
    u = a * a
    u *= a
    u *= _GELU_A
    u += a
    u *= _GELU_C
    t = np.tanh(u, out=u)
    return (0.5 * a) * (1.0 + t), t


def _bwd_gelu(g, vals, out, ctx, attrs, needs):
    a = vals[0]
    t = ctx
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * (a * a))
    return [g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)]


def _fwd_softmax(vals, attrs):
    (a,) = vals
    axis = _norm_axis(attrs["axis"], a.ndim, OpKind.SOFTMAX)
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, axis


def _bwd_softmax(g, vals, out, ctx, attrs, needs):
    axis = ctx
    gy = g * out
    return [gy - out * gy.sum(axis=axis, keepdims=True)]


def _fwd_layernorm(vals, attrs):
    (a,) = vals
    axis = _norm_axis(attrs["axis"], a.ndim, OpKind.LAYERNORM)
    eps = a.dtype.type(attrs.get("eps", 1e-5))
    mu = a.mean(axis=axis, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, (axis, inv)


def _bwd_layernorm(g, vals, out, ctx, attrs, needs):
    axis, inv = ctx
    gm = g.mean(axis=axis, keepdims=True)
    gym = (g * out).mean(axis=axis, keepdims=True)
    return [inv * (g - gm - out * gym)]


def _fwd_max_reduce(vals, attrs):
    (a,) = vals
    axis = _norm_axis(attrs["axis"], a.ndim, OpKind.MAX_REDUCE)
    _require(a.shape[axis] >= 1, OpKind.MAX_REDUCE, f"empty axis {axis} in {a.shape}")
    return a.max(axis=axis), axis


def _bwd_max_reduce(g, vals, out, ctx, attrs, needs):
    # route to the first max along the axis (lowest index on ties)
    a = vals[0]
    axis = ctx
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    ga = np.zeros_like(a)
    np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
    return [ga]


def _fwd_topk_reduce(vals, attrs):
    (a,) = vals
    axis = _norm_axis(attrs["axis"], a.ndim, OpKind.TOPK_REDUCE)
    k = attrs["k"]
    _require(1 <= k <= a.shape[axis], OpKind.TOPK_REDUCE,
             f"k={k} invalid for dim {a.shape[axis]} of {a.shape}")
    # stable sort of -a: descending values, ties at the lowest source index
    order = np.argsort(-a, axis=axis, kind="stable")
    sel = np.take(order, np.arange(k), axis=axis)
    out = np.take_along_axis(a, sel, axis=axis)
    return out, (axis, sel)


def _bwd_topk_reduce(g, vals, out, ctx, attrs, needs):
    axis, sel = ctx
    ga = np.zeros_like(vals[0])
    # selected source slots are distinct along the axis, so assignment == add
    np.put_along_axis(ga, sel, g, axis=axis)
    return [ga]


def _fwd_mean_reduce(vals, attrs):
    (a,) = vals
    axis = _norm_axis(attrs["axis"], a.ndim, OpKind.MEAN_REDUCE)
    _require(a.shape[axis] >= 1, OpKind.MEAN_REDUCE, f"empty axis {axis} in {a.shape}")
    return a.mean(axis=axis), axis


def _bwd_mean_reduce(g, vals, out, ctx, attrs, needs):
    a = vals[0]
    axis = ctx
    n = a.shape[axis]
    return [np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy()]


def _fwd_cross_entropy(vals, attrs):
    (logits,) = vals
    labels = np.asarray(attrs["labels"])
    _require(logits.ndim in (1, 2), OpKind.CROSS_ENTROPY_WITH_LOGITS,
             f"logits must be (C,) or (B, C), got {logits.shape}")
    l2 = logits if logits.ndim == 2 else logits[None, :]
    lab = labels.reshape(-1).astype(np.int64)
    _require(lab.shape[0] == l2.shape[0], OpKind.CROSS_ENTROPY_WITH_LOGITS,
             f"{lab.shape[0]} labels for {l2.shape[0]} logit rows")
    if lab.size and (lab.min() < 0 or lab.max() >= l2.shape[1]):
        raise ShapeMismatchError(
            f"cross_entropy_with_logits: label out of range for C={l2.shape[1]}")
    shifted = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(l2.shape[0]), lab]
    p = np.exp(logp)
    return np.asarray(nll.mean(), dtype=logits.dtype), (p, lab)


def _bwd_cross_entropy(g, vals, out, ctx, attrs, needs):
    logits = vals[0]
    p, lab = ctx
    grad = p.copy()
    grad[np.arange(p.shape[0]), lab] -= 1.0
    grad *= g / p.shape[0]
    return [grad.reshape(logits.shape)]


def _fwd_sq_dist(vals, attrs):
    a, b = vals
    _require(a.ndim >= 2 and b.ndim >= 2, OpKind.SQUARED_DISTANCE_MATRIX,
             f"needs ndim >= 2, got {a.shape} and {b.shape}")
    _require(a.shape[-1] == b.shape[-1], OpKind.SQUARED_DISTANCE_MATRIX,
             f"coordinate dims differ: {a.shape} vs {b.shape}")
    _require(a.shape[:-2] == b.shape[:-2], OpKind.SQUARED_DISTANCE_MATRIX,
             f"leading dims differ: {a.shape} vs {b.shape}")
    diff = a[..., :, None, :] - b[..., None, :, :]
    return (diff * diff).sum(axis=-1), diff


def _bwd_sq_dist(g, vals, out, ctx, attrs, needs):
    diff = ctx
    ga = gb = None
    if needs[0]:
        ga = 2.0 * (g[..., None] * diff).sum(axis=-2)
    if needs[1]:
        gb = -2.0 * (g[..., None] * diff).sum(axis=-3)
    return [ga, gb]


_FORWARD = {
    OpKind.MATMUL: _fwd_matmul,
    OpKind.ADD: _fwd_add,
    OpKind.MUL: _fwd_mul,
    OpKind.SCALE: _fwd_scale,
    OpKind.CONCAT: _fwd_concat,
    OpKind.SLICE: _fwd_slice,
    OpKind.GATHER: _fwd_gather,
    OpKind.TRANSPOSE: _fwd_transpose,
    OpKind.RESHAPE: _fwd_reshape,
    OpKind.RELU: _fwd_relu,
    OpKind.GELU: _fwd_gelu,
    OpKind.SOFTMAX: _fwd_softmax,
    OpKind.LAYERNORM: _fwd_layernorm,
    OpKind.MAX_REDUCE: _fwd_max_reduce,
    OpKind.TOPK_REDUCE: _fwd_topk_reduce,
    OpKind.MEAN_REDUCE: _fwd_mean_reduce,
    OpKind.CROSS_ENTROPY_WITH_LOGITS: _fwd_cross_entropy,
    OpKind.SQUARED_DISTANCE_MATRIX: _fwd_sq_dist,
}

_BACKWARD = {
    OpKind.MATMUL: _bwd_matmul,
    OpKind.ADD: _bwd_add,
    OpKind.MUL: _bwd_mul,
    OpKind.SCALE: _bwd_scale,
    OpKind.CONCAT: _bwd_concat,
    OpKind.SLICE: _bwd_slice,
    OpKind.GATHER: _bwd_gather,
    OpKind.TRANSPOSE: _bwd_transpose,
    OpKind.RESHAPE: _bwd_reshape,
    OpKind.RELU: _bwd_relu,
    OpKind.GELU: _bwd_gelu,
    OpKind.SOFTMAX: _bwd_softmax,
    OpKind.LAYERNORM: _bwd_layernorm,
    OpKind.MAX_REDUCE: _bwd_max_reduce,
    OpKind.TOPK_REDUCE: _bwd_topk_reduce,
    OpKind.MEAN_REDUCE: _bwd_mean_reduce,
    OpKind.CROSS_ENTROPY_WITH_LOGITS: _bwd_cross_entropy,
    OpKind.SQUARED_DISTANCE_MATRIX: _bwd_sq_dist,
}


def forward(kind: OpKind, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply one operator, validating shapes/dtypes, and record the graph edge."""
    attrs = attrs or {}
    dt = inputs[0].dtype
    for t in inputs[1:]:
        if t.dtype != dt:
            raise DtypeMismatchError(
                f"{kind.value}: mixed dtypes {dt} and {t.dtype}")
    vals = [t.value for t in inputs]
    out_val, ctx = _FORWARD[kind](vals, attrs)
    requires = any(t.requires_grad for t in inputs)
    node = OpNode(kind, tuple(inputs), attrs, ctx) if requires else None
    return Tensor(out_val, requires_grad=requires, producer=node)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf under `loss`.

    Returns a map from leaf tensor to its (accumulated) gradient buffer. Each
    call adds onto existing `grad` buffers; call `zero_grad` between steps.
    """
    if loss.value.ndim != 0:
        raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.producer is not None:
            for inp in t.producer.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.producer is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
                leaves[t] = t.grad
            continue
        node = t.producer
        needs = tuple(inp.requires_grad for inp in node.inputs)
        in_grads = _BACKWARD[node.kind](g, [i.value for i in node.inputs],
                                        t.value, node.ctx, node.attrs, needs)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = ig if acc is None else acc + ig

    if not leaves:
        raise GraphError("no requires_grad leaf reachable from loss (detached graph)")
    return leaves


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# convenience wrappers (thin; all dispatch through `forward`)

def matmul(a, b):
    return forward(OpKind.MATMUL, [a, b])


def add(a, b):
    return forward(OpKind.ADD, [a, b])


def mul(a, b):
    return forward(OpKind.MUL, [a, b])


def scale(a, factor):
    return forward(OpKind.SCALE, [a], {"factor": float(factor)})


def concat(tensors, axis):
    return forward(OpKind.CONCAT, list(tensors), {"axis": axis})


def slice_axis(a, axis, start, stop):
    return forward(OpKind.SLICE, [a], {"axis": axis, "start": start, "stop": stop})


def gather_rows(a, indices):
    return forward(OpKind.GATHER, [a], {"indices": np.asarray(indices)})


def transpose(a, perm):
    return forward(OpKind.TRANSPOSE, [a], {"perm": tuple(perm)})


def reshape(a, shape):
    return forward(OpKind.RESHAPE, [a], {"shape": tuple(shape)})


def relu(a):
    return forward(OpKind.RELU, [a])


def gelu(a):
    return forward(OpKind.GELU, [a])


def softmax(a, axis):
    return forward(OpKind.SOFTMAX, [a], {"axis": axis})


def layernorm(a, axis=-1, eps=1e-5):
    return forward(OpKind.LAYERNORM, [a], {"axis": axis, "eps": eps})


def max_reduce(a, axis):
    return forward(OpKind.MAX_REDUCE, [a], {"axis": axis})


def topk_reduce(a, axis, k):
    return forward(OpKind.TOPK_REDUCE, [a], {"axis": axis, "k": k})


def mean_reduce(a, axis):
    return forward(OpKind.MEAN_REDUCE, [a], {"axis": axis})


def cross_entropy_with_logits(logits, labels):
    return forward(OpKind.CROSS_ENTROPY_WITH_LOGITS, [logits], {"labels": labels})


def squared_distance_matrix(a, b):
    return forward(OpKind.SQUARED_DISTANCE_MATRIX, [a, b])


# ---------------------------------------------------------------------------
# finite-difference verification

def _probe_scalar(out_val: np.ndarray, r: np.ndarray) -> float:
    return float((out_val * r).mean())


def finite_diff_check(kind: OpKind, inputs: list[Tensor], attrs: dict | None = None,
                      h: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Contracts a random fixed probe against the op output to get a scalar,
    differentiates it both ways, and returns
    max over input entries of |analytic - numeric| / max(1, |analytic|).
    Inputs must be f64 and sampled away from non-differentiable points
    (exact max/topk ties, relu kinks).
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    for t in inputs:
        if t.dtype != F64:
            raise DtypeMismatchError("finite_diff_check requires f64 inputs")
    attrs = attrs or {}
    rng = rng or np.random.default_rng(0)

    work = [tensor(t.value.copy(), requires_grad=True) for t in inputs]
    out = forward(kind, work, attrs)
    r = rng.standard_normal(out.value.shape) if out.value.ndim else np.asarray(1.0)

    flat = reshape(mul(out, constant(r, dtype=np.float64)), (max(out.value.size, 1),))
    loss = mean_reduce(flat, 0)
    backward(loss)

    rule = _FORWARD[kind]

    def f() -> float:
        out_val, _ = rule([w.value for w in work], attrs)
        return _probe_scalar(out_val, r)

    max_err = 0.0
    for w in work:
        analytic = w.grad if w.grad is not None else np.zeros_like(w.value)
        buf = w.value
        flat_buf = buf.reshape(-1)
        flat_an = analytic.reshape(-1)
        for j in range(flat_buf.size):
            v0 = flat_buf[j]
            flat_buf[j] = v0 + h
            f_plus = f()
            flat_buf[j] = v0 - h
            f_minus = f()
            flat_buf[j] = v0
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(flat_an[j] - numeric) / max(1.0, abs(flat_an[j]))
            if err > max_err:
                max_err = err
    return max_err


def finite_diff_loss_check(build_loss, leaves: dict[str, Tensor], h: float = 1e-5,
                           max_entries_per_leaf: int = 24,
                           rng: np.random.Generator | None = None) -> float:
    """Verify gradients of an arbitrary scalar loss against central differences.

    `build_loss()` must rebuild the graph from the current leaf values and
    return a scalar tensor. Every leaf tensor is checked on up to
    `max_entries_per_leaf` randomly chosen entries. Returns the max relative
    error over all checked entries.
    """
    rng = rng or np.random.default_rng(0)
    for name, t in leaves.items():
        if t.dtype != F64:
            raise DtypeMismatchError(f"leaf {name} must be f64")
        t.zero_grad()
    loss = build_loss()
    backward(loss)

    max_err = 0.0
    for name, t in leaves.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        flat_buf = t.value.reshape(-1)
        flat_an = analytic.reshape(-1)
        n = flat_buf.size
        picks = np.arange(n) if n <= max_entries_per_leaf else \
            rng.choice(n, size=max_entries_per_leaf, replace=False)
        for j in picks:
            v0 = flat_buf[j]
            flat_buf[j] = v0 + h
            f_plus = float(build_loss().value)
            flat_buf[j] = v0 - h
            f_minus = float(build_loss().value)
            flat_buf[j] = v0
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(flat_an[j] - numeric) / max(1.0, abs(flat_an[j]))
            if err > max_err:
                max_err = err
    for t in leaves.values():
        t.zero_grad()
    return max_err
