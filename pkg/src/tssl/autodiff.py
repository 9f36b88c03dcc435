"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every primitive allocates a fresh output (no views into inputs), records
its parents and a vector-Jacobian closure, and the backward pass walks
the graph in deterministic reverse topological order. Gradients never
flow through stop_gradient nodes: a stop_gradient output is a forward
identity whose upstream contribution is exactly zero, not merely small.

Finite-difference checking (grad_check) re-evaluates the function with
perturbed leaves while replaying the stop_gradient outputs captured on
the baseline evaluation, so the numeric gradient sees the same detached
semantics the analytic one does.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from . import kernels, special

_NODE_COUNTER = itertools.count()
_NO_GRAD = False
_DEBUG_NAN = False

# stop_gradient capture/replay state for grad_check. "record" appends each
# stop_gradient output; "replay" substitutes them back by call order.
_SG_MODE = None
_SG_STORE = None
_SG_CURSOR = 0


class ShapeError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


def set_debug_nan_checks(enabled: bool) -> None:
    """Toggle NaN assertions after every primitive forward."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


@contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _NO_GRAD
    prev = _NO_GRAD
    _NO_GRAD = True
    try:
        yield
    finally:
        _NO_GRAD = prev


@contextmanager
def _sg_mode(mode, store):
    global _SG_MODE, _SG_STORE, _SG_CURSOR
    prev = (_SG_MODE, _SG_STORE, _SG_CURSOR)
    _SG_MODE, _SG_STORE, _SG_CURSOR = mode, store, 0
    try:
        yield
    finally:
        _SG_MODE, _SG_STORE, _SG_CURSOR = prev


def _reset_sg_cursor():
    global _SG_CURSOR
    _SG_CURSOR = 0


class Tensor:
    """A node in the computation graph owning its float64 output."""

    __slots__ = ("data", "parents", "vjp", "op", "requires_grad", "needs_grad",
                 "is_stop_gradient", "node_id")

    def __init__(self, data, parents=(), vjp=None, op="const",
                 requires_grad=False, is_stop_gradient=False):
        # Ops hand in freshly allocated arrays; the public constructors
        # (constant / parameter / _lift) copy user-owned buffers first.
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad
        self.is_stop_gradient = is_stop_gradient
        if is_stop_gradient:
            self.needs_grad = False
        else:
            self.needs_grad = requires_grad or any(p.needs_grad for p in self.parents)
        self.node_id = next(_NODE_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, needs_grad={self.needs_grad})"

    # Operator sugar; scalars and ndarrays are lifted to constant nodes.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _scalar_err(t):
    raise ValueError(f"item() requires a size-1 tensor, got shape {t.shape}")


def _lift(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.array(value, dtype=np.float64, copy=True))


def constant(value) -> Tensor:
    return _lift(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, op="param")


def _make(data, parents, vjp, op):
    if _DEBUG_NAN and np.isnan(data).any():
        raise FloatingPointError(f"{op}: forward produced NaN")
    if _NO_GRAD or not any(p.needs_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents=parents, vjp=vjp, op=op)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy-style trailing-axis broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    data = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp, "div")


def scale(a, s: float):
    a = _lift(a)
    s = float(s)
    data = a.data * s

    def vjp(g):
        return (g * s,)

    return _make(data, (a,), vjp, "scale")


def add_scalar(a, s: float):
    a = _lift(a)
    data = a.data + float(s)

    def vjp(g):
        return (g,)

    return _make(data, (a,), vjp, "add_scalar")


# ---------------------------------------------------------------------------
# Elementwise nonlinearities


def relu(a):
    a = _lift(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp, "relu")


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (a,), vjp, "exp")


def log(a):
    a = _lift(a)
    if np.any(a.data <= 0):
        raise ValueError("log: arguments must be positive")
    ad = a.data
    data = np.log(ad)

    def vjp(g):
        return (g / ad,)

    return _make(data, (a,), vjp, "log")


def softplus(a):
    a = _lift(a)
    ad = a.data
    data = np.logaddexp(0.0, ad)

    def vjp(g):
        # sigmoid computed stably from the negative branch
        return (g * np.exp(-np.logaddexp(0.0, -ad)),)

    return _make(data, (a,), vjp, "softplus")


def abs_(a):
    a = _lift(a)
    ad = a.data
    data = np.abs(ad)

    def vjp(g):
        return (g * np.sign(ad),)

    return _make(data, (a,), vjp, "abs")


def minimum_scalar(a, cap: float):
    """Elementwise min(a, cap); the gradient passes only where a < cap."""
    a = _lift(a)
    cap = float(cap)
    mask = a.data < cap
    data = np.where(mask, a.data, cap)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp, "minimum_scalar")


def lgamma(a):
    a = _lift(a)
    ad = a.data
    data = special.lgamma(ad)

    def vjp(g):
        return (g * special.digamma(ad),)

    return _make(data, (a,), vjp, "lgamma")


def digamma(a):
    a = _lift(a)
    ad = a.data
    data = special.digamma(ad)

    def vjp(g):
        return (g * special.trigamma(ad),)

    return _make(data, (a,), vjp, "digamma")


# ---------------------------------------------------------------------------
# Linear algebra and reductions


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make(data, (a, b), vjp, "matmul")


def transpose(a):
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-d operand, got {a.shape}")
    data = a.data.T.copy()

    def vjp(g):
        return (g.T.copy(),)

    return _make(data, (a,), vjp, "transpose")


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    in_shape = a.shape
    data = a.data.reshape(shape).copy()

    def vjp(g):
        return (g.reshape(in_shape),)

    return _make(data, (a,), vjp, "reshape")


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    axis = _normalize_axis(axis, a.ndim)
    in_shape = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gx = g
        if not keepdims and axis is not None:
            expand = list(g.shape)
            for ax in sorted(axis):
                expand.insert(ax, 1)
            gx = g.reshape(expand)
        return (np.broadcast_to(gx, in_shape).copy(),)

    return _make(np.asarray(data), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    axis = _normalize_axis(axis, a.ndim)
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        count = 1
        for ax in axis:
            count *= in_shape[ax]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        gx = g
        if not keepdims and axis is not None:
            expand = list(g.shape)
            for ax in sorted(axis):
                expand.insert(ax, 1)
            gx = g.reshape(expand)
        return (np.broadcast_to(gx, in_shape).copy() / count,)

    return _make(np.asarray(data), (a,), vjp, "mean")


def dot(a, b):
    """Row-wise inner product over the last axis; operands must match shape."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: operands must share a shape, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    data = np.sum(ad * bd, axis=-1)

    def vjp(g):
        ge = np.expand_dims(g, -1)
        return ge * bd, ge * ad

    return _make(data, (a, b), vjp, "dot")


def logsumexp(a, axis=-1):
    a = _lift(a)
    ax = axis % a.ndim
    ad = a.data
    amax = np.max(ad, axis=ax, keepdims=True)
    shifted = np.exp(ad - amax)
    total = np.sum(shifted, axis=ax, keepdims=True)
    data = np.squeeze(amax + np.log(total), axis=ax)
    softmax = shifted / total

    def vjp(g):
        return (np.expand_dims(g, ax) * softmax,)

    return _make(data, (a,), vjp, "logsumexp")


def l2_normalize(a, eps: float = 1e-12):
    """Normalize rows (last axis) to unit L2 norm; eps keeps zero rows finite."""
    a = _lift(a)
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    denom = norm + eps
    data = ad / denom
    norm_safe = np.maximum(norm, 1e-30)

    def vjp(g):
        inner = np.sum(g * ad, axis=-1, keepdims=True)
        return (g / denom - ad * inner / (norm_safe * denom * denom),)

    return _make(data, (a,), vjp, "l2_normalize")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one operand")
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)].copy())
        return tuple(pieces)

    return _make(data, tuple(tensors), vjp, "concat")


def slice_rows(a, start: int, stop: int):
    """Contiguous slice along the first axis."""
    a = _lift(a)
    in_shape = a.shape
    if not (0 <= start <= stop <= in_shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of bounds for shape {in_shape}")
    data = a.data[start:stop].copy()

    def vjp(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[start:stop] = g
        return (gx,)

    return _make(data, (a,), vjp, "slice_rows")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    """2-d convolution, NCHW layout, square stride and zero padding.

    Lowered to im2col + matmul; the backward pass reuses the stored patch
    matrix and col2im for the input gradient.
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-d input and weight, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ic}")
    oh = kernels.conv_out_size(h, kh, stride, pad)
    ow = kernels.conv_out_size(wd, kw, stride, pad)
    cols = kernels.im2col(x.data, kh, kw, stride, pad)          # (B*OH*OW, C*KH*KW)
    wmat = w.data.reshape(oc, c * kh * kw)
    out = cols @ wmat.T                                          # (B*OH*OW, OC)
    if b is not None:
        b = _lift(b)
        if b.shape != (oc,):
            raise ShapeError(f"conv2d: bias must have shape {(oc,)}, got {b.shape}")
        out = out + b.data
    data = out.reshape(bsz, oh, ow, oc).transpose(0, 3, 1, 2).copy()
    x_needs = x.needs_grad

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, oc)
        gw = (gmat.T @ cols).reshape(oc, c, kh, kw)
        gx = None
        if x_needs:
            gcols = gmat @ wmat
            gx = kernels.col2im(gcols, bsz, c, h, wd, kh, kw, stride, pad)
        if b is not None:
            return gx, gw, gmat.sum(axis=0)
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, vjp, "conv2d")


def stop_gradient(a):
    """Forward identity that blocks all gradient flow into its subgraph."""
    global _SG_CURSOR
    a = _lift(a)
    if _SG_MODE == "replay":
        if _SG_STORE is None or _SG_CURSOR >= len(_SG_STORE):
            raise RuntimeError("stop_gradient replay: call sequence longer than recording")
        data = _SG_STORE[_SG_CURSOR]
        _SG_CURSOR += 1
        if data.shape != a.shape:
            raise RuntimeError("stop_gradient replay: shape drift between evaluations")
        return Tensor(data.copy(), parents=(a,), op="stop_gradient", is_stop_gradient=True)
    if _SG_MODE == "record":
        _SG_STORE.append(a.data.copy())
    return Tensor(a.data.copy(), parents=(a,), op="stop_gradient", is_stop_gradient=True)


# ---------------------------------------------------------------------------
# Primitive registry (introspection and sweep-style tests)

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "add_scalar": add_scalar,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "abs": abs_,
    "minimum_scalar": minimum_scalar,
    "lgamma": lgamma,
    "digamma": digamma,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "dot": dot,
    "logsumexp": logsumexp,
    "l2_normalize": l2_normalize,
    "concat": concat,
    "slice_rows": slice_rows,
    "conv2d": conv2d,
    "stop_gradient": stop_gradient,
}


def forward_primitive(kind: str, *args, **kwargs):
    """Dispatch a primitive by name; unknown kinds are rejected."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass


class GradientMap:
    """Mapping from node id to accumulated adjoint.

    Nodes never reached by the backward sweep (for example anything hidden
    behind stop_gradient) have no entry; adjoint() reports those as exact
    zeros of the right shape.
    """

    def __init__(self, adjoints):
        self._adjoints = adjoints

    def __contains__(self, t: Tensor):
        return t.node_id in self._adjoints

    def get(self, t: Tensor):
        return self._adjoints.get(t.node_id)

    def adjoint(self, t: Tensor) -> np.ndarray:
        g = self._adjoints.get(t.node_id)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __len__(self):
        return len(self._adjoints)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode sweep from a scalar loss.

    Traversal and accumulation order are fully determined by graph
    construction order, so repeated runs produce bit-identical adjoints.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        if not node.is_stop_gradient:
            for p in node.parents:
                if p.needs_grad and p.node_id not in visited:
                    stack.append((p, False))
    adjoints = {n.node_id: np.zeros_like(n.data) for n in topo}
    adjoints[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.is_stop_gradient or not node.parents or node.vjp is None:
            continue
        grads = node.vjp(adjoints[node.node_id])
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.needs_grad:
                continue
            acc = adjoints.get(parent.node_id)
            if acc is not None:
                adjoints[parent.node_id] = acc + g
    return GradientMap(adjoints)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(fn, params, step: float = 1e-5, rtol: float = 1e-4,
               atol: float = 1e-7):
    """Compare analytic gradients of fn(*params) against central differences.

    fn must build a scalar loss from the given parameter tensors and be
    deterministic. stop_gradient outputs are captured on the baseline
    evaluation and replayed during perturbed evaluations, so the numeric
    gradient respects detachment instead of leaking through the identity.

    Returns a dict with per-parameter max absolute/relative error and an
    overall "passed" flag: |analytic - numeric| <= atol + rtol * max(|a|, |n|).
    """
    record = []
    with _sg_mode("record", record):
        loss = fn(*params)
    if loss.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar loss")
    gmap = backward(loss)
    analytic = [gmap.adjoint(p).copy() for p in params]

    report = {"passed": True, "params": []}
    with _sg_mode("replay", record):
        for idx, p in enumerate(params):
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                _reset_sg_cursor()
                with no_grad():
                    f_plus = fn(*params).item()
                flat[i] = orig - step
                _reset_sg_cursor()
                with no_grad():
                    f_minus = fn(*params).item()
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2.0 * step)
            a = analytic[idx].reshape(-1)
            diff = np.abs(a - numeric)
            scale_ = np.maximum(np.abs(a), np.abs(numeric))
            ok = bool(np.all(diff <= atol + rtol * scale_))
            max_rel = float(np.max(diff / np.maximum(scale_, atol / rtol))) if flat.size else 0.0
            report["params"].append({
                "index": idx,
                "max_abs_err": float(diff.max()) if flat.size else 0.0,
                "max_rel_err": max_rel,
                "passed": ok,
            })
            report["passed"] = report["passed"] and ok
    return report
