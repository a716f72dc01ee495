"""Dense-tensor math with reverse-mode differentiation on a recorded tape.

A :class:`Tensor` wraps a numpy array (float32 by default, float64 for
verification work). Every operation that touches a gradient-requiring input
records a node holding its parents and a VJP closure; the resulting graph,
in execution order, is the tape (`trace` returns it topologically sorted).

The VJP closures are themselves written in terms of tape operations, so a
gradient can be differentiated again by passing ``create_graph=True`` to
:func:`backward` -- this is what makes gradient penalties exact rather than
approximated.

All operations are pure: they never mutate their inputs, identical inputs
give bit-identical outputs, and the graph state is thread-local.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import GraphError, NumericalError, ShapeError
from . import kernels

DEFAULT_DTYPE = np.float32

_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def _grad_mode(flag):
    prev = grad_enabled()
    _STATE.enabled = flag
    try:
        yield
    finally:
        _STATE.enabled = prev


@contextmanager
def no_grad():
    """Disable graph recording (inference / constant computations)."""
    with _grad_mode(False):
        yield


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, (np.ndarray, np.floating))
                  and (arr.dtype == np.float32 or arr.dtype == np.float64)):
            # float arrays keep their precision; lists and python scalars are fp32
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # A little arithmetic sugar; the full op set lives at module level.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data, parents, vjp) -> Tensor:
    arr = np.asarray(data)
    out = Tensor(arr, dtype=arr.dtype)  # op results keep their dtype exactly
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


@contextmanager
def frozen(tensors):
    """Temporarily clear ``requires_grad`` on the given tensors.

    Forward passes executed inside the block skip gradient bookkeeping for
    them (e.g. discriminator weights during a generator step).
    """
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s


def _check_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    _check_dtype(a, b, op)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _scalar(x, like: Tensor):
    return like.dtype.type(x)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, neg(g)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")

    def vjp(g):
        return (mul(g, b) if a.requires_grad else None,
                mul(g, a) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), vjp)


def add_scalar(a, s) -> Tensor:
    a = as_tensor(a)
    return _node(a.data + _scalar(s, a), (a,), lambda g: (g,))


def mul_scalar(a, s) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _node(a.data * _scalar(s, a), (a,), lambda g: (mul_scalar(g, s),))


def cmul(a, const: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient flows into the constant)."""
    a = as_tensor(a)
    if const.shape != a.shape:
        raise ShapeError(f"cmul: shapes {a.shape} and {const.shape} do not match")
    return _node(a.data * const, (a,), lambda g: (cmul(g, const),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (mul_scalar(mul(g, a), 2.0),))


def rsqrt(a) -> Tensor:
    """1 / sqrt(x), elementwise. Domain: x > 0."""
    a = as_tensor(a)
    out = _node(1.0 / np.sqrt(a.data), (a,), None)
    if out._parents:
        def vjp(g):
            # d/dx x^(-1/2) = -1/2 x^(-3/2) = -1/2 y^3
            return (mul_scalar(mul(g, mul(out, square(out))), -0.5),)

        out._vjp = vjp
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    t = np.exp(-np.abs(x))  # always <= 1, no overflow
    data = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = _node(data.astype(a.dtype, copy=False), (a,), None)
    if out._parents:
        def vjp(g):
            return (mul(g, mul(out, add_scalar(neg(out), 1.0))),)

        out._vjp = vjp
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)) with the usual overflow-safe formulation."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _node(data.astype(a.dtype, copy=False), (a,),
                 lambda g: (mul(g, sigmoid(a)),))


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    """x for x >= 0 else alpha * x."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"leaky_relu: alpha must be in [0, 1), got {alpha}")
    a = as_tensor(a)
    x = a.data
    mask = np.where(x >= 0, x.dtype.type(1), x.dtype.type(alpha))
    return _node(x * mask, (a,), lambda g: (cmul(g, mask),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def flip2(a) -> Tensor:
    """Reverse the last two axes (kernel rotation by 180 degrees)."""
    a = as_tensor(a)
    return _node(np.ascontiguousarray(a.data[..., ::-1, ::-1]), (a,),
                 lambda g: (flip2(g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def vjp(g):
        return (matmul(g, transpose(b, (1, 0))) if a.requires_grad else None,
                matmul(transpose(a, (1, 0)), g) if b.requires_grad else None)

    return _node(a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions and their broadcast inverses (each pair is self-adjoint)
# ---------------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shp = a.shape
    return _node(a.data.sum(), (a,), lambda g: (fill(g, shp),))


def fill(s, shape) -> Tensor:
    s = as_tensor(s)
    if s.size != 1:
        raise ShapeError(f"fill: expected scalar, got shape {s.shape}")
    data = np.full(shape, s.data.item(), dtype=s.dtype)
    return _node(data, (s,), lambda g: (sum_all(g),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return mul_scalar(sum_all(a), 1.0 / a.size)


def sum_rows(a) -> Tensor:
    """(n, d) -> (d,): sum over the batch axis."""
    a = as_tensor(a)
    n = a.shape[0]
    return _node(a.data.sum(axis=0), (a,), lambda g: (repeat_rows(g, n),))


def repeat_rows(v, n: int) -> Tensor:
    """(d,) -> (n, d): replicate a row vector."""
    v = as_tensor(v)
    data = np.ascontiguousarray(np.broadcast_to(v.data, (n,) + v.shape))
    return _node(data, (v,), lambda g: (sum_rows(g),))


def sum_cols(a) -> Tensor:
    """(n, d) -> (n,): sum over the feature axis."""
    a = as_tensor(a)
    d = a.shape[1]
    return _node(a.data.sum(axis=1), (a,), lambda g: (repeat_cols(g, d),))


def repeat_cols(v, d: int) -> Tensor:
    """(n,) -> (n, d): replicate a column."""
    v = as_tensor(v)
    data = np.ascontiguousarray(np.broadcast_to(v.data[:, None], v.shape + (d,)))
    return _node(data, (v,), lambda g: (sum_cols(g),))


def sum_hw(a) -> Tensor:
    """(n, c, h, w) -> (n, c): spatial sum."""
    a = as_tensor(a)
    hw = a.shape[2:]
    return _node(a.data.sum(axis=(2, 3)), (a,), lambda g: (repeat_hw(g, hw),))


def repeat_hw(v, hw) -> Tensor:
    """(n, c) -> (n, c, h, w): replicate over space."""
    v = as_tensor(v)
    h, w = hw
    data = np.ascontiguousarray(
        np.broadcast_to(v.data[:, :, None, None], v.shape + (h, w)))
    return _node(data, (v,), lambda g: (sum_hw(g),))


def sum_chan(a) -> Tensor:
    """(n, c, h, w) -> (n, 1, h, w): sum over channels."""
    a = as_tensor(a)
    c = a.shape[1]
    return _node(a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (repeat_chan(g, c),))


def repeat_chan(v, c: int) -> Tensor:
    """(n, 1, h, w) -> (n, c, h, w): replicate over channels."""
    v = as_tensor(v)
    n, one, h, w = v.shape
    if one != 1:
        raise ShapeError(f"repeat_chan: expected channel dim 1, got shape {v.shape}")
    data = np.ascontiguousarray(np.broadcast_to(v.data, (n, c, h, w)))
    return _node(data, (v,), lambda g: (sum_chan(g),))


def sum_batch(a) -> Tensor:
    """(n, ...) -> (1, ...): sum over the batch axis, keeping it."""
    a = as_tensor(a)
    n = a.shape[0]
    return _node(a.data.sum(axis=0, keepdims=True), (a,),
                 lambda g: (repeat_batch(g, n),))


def repeat_batch(v, n: int) -> Tensor:
    """(1, ...) -> (n, ...): replicate along the batch axis."""
    v = as_tensor(v)
    if v.shape[0] != 1:
        raise ShapeError(f"repeat_batch: expected leading dim 1, got shape {v.shape}")
    data = np.ascontiguousarray(np.broadcast_to(v.data, (n,) + v.shape[1:]))
    return _node(data, (v,), lambda g: (sum_batch(g),))


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------

def upsample2x(a, mode: str = "nearest") -> Tensor:
    """(n, c, h, w) -> (n, c, 2h, 2w) by 2x2 pixel replication."""
    if mode != "nearest":
        raise ValueError(f"upsample2x: unsupported mode {mode!r}")
    a = as_tensor(a)
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)
    return _node(data, (a,), lambda g: (pool_sum2x(g),))


def pool_sum2x(a) -> Tensor:
    """(n, c, 2h, 2w) -> (n, c, h, w): sum each 2x2 block."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_sum2x: spatial dims must be even, got {a.shape}")
    data = a.data.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
    return _node(data, (a,), lambda g: (upsample2x(g),))


def avg_pool2x(a) -> Tensor:
    return mul_scalar(pool_sum2x(a), 0.25)


# ---------------------------------------------------------------------------
# convolution (the jitted hot path)
# ---------------------------------------------------------------------------

def conv3x3(x, k) -> Tensor:
    """Bias-free 3x3 cross-correlation, stride 1, zero padding 1."""
    x, k = as_tensor(x), as_tensor(k)
    _check_dtype(x, k, "conv3x3")
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: expected (n,c,h,w) and (co,c,3,3), "
                         f"got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv3x3: channel mismatch between input {x.shape} "
                         f"and kernel {k.shape}")

    def vjp(g):
        gx = conv3x3(g, flip2(transpose(k, (1, 0, 2, 3)))) if x.requires_grad else None
        gk = conv3x3_wgrad(x, g) if k.requires_grad else None
        return (gx, gk)

    return _node(kernels.conv3x3(x.data, k.data), (x, k), vjp)


def conv3x3_wgrad(x, gy) -> Tensor:
    """Adjoint of conv3x3 w.r.t. the kernel; itself differentiable."""
    x, gy = as_tensor(x), as_tensor(gy)
    _check_dtype(x, gy, "conv3x3_wgrad")
    if x.shape[0] != gy.shape[0] or x.shape[2:] != gy.shape[2:]:
        raise ShapeError(f"conv3x3_wgrad: incompatible shapes {x.shape} and {gy.shape}")

    def vjp(G):
        gx = conv3x3(gy, flip2(transpose(G, (1, 0, 2, 3)))) if x.requires_grad else None
        ggy = conv3x3(x, G) if gy.requires_grad else None
        return (gx, ggy)

    return _node(kernels.conv3x3_wgrad(x.data, gy.data), (x, gy), vjp)


# ---------------------------------------------------------------------------
# network-level composites
# ---------------------------------------------------------------------------

def dense(x, w, b) -> Tensor:
    """y = x @ w + b for (n,in) x (in,out) + (out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not chain with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), repeat_rows(b, x.shape[0]))


def conv2d(x, k, bias) -> Tensor:
    """3x3 same-size convolution with per-output-channel bias."""
    x, k, bias = as_tensor(x), as_tensor(k), as_tensor(bias)
    y = conv3x3(x, k)
    if bias.shape != (k.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {k.shape}")
    n = x.shape[0]
    return add(y, repeat_hw(repeat_rows(bias, n), y.shape[2:]))


def _per_channel(v, n: int, hw) -> Tensor:
    """Expand a (c,) or (n,c) style vector to (n,c,h,w)."""
    v = as_tensor(v)
    if v.ndim == 1:
        v = repeat_rows(v, n)
    elif v.shape[0] != n:
        raise ShapeError(f"per-channel vector batch {v.shape} does not match n={n}")
    return repeat_hw(v, hw)


def adain(x, style_scale, style_bias, eps: float = 1e-8) -> Tensor:
    """Per-sample, per-channel spatial normalization followed by style scale/bias.

    ``style_scale`` / ``style_bias`` may be (c,) or per-sample (n,c).
    Variance is the population variance over the spatial extent; ``eps``
    guards the constant-channel case.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    inv_hw = 1.0 / (h * w)
    mu = mul_scalar(sum_hw(x), inv_hw)                       # (n, c)
    centered = sub(x, repeat_hw(mu, (h, w)))
    var = mul_scalar(sum_hw(square(centered)), inv_hw)       # (n, c)
    inv_std = rsqrt(add_scalar(var, eps))
    normalized = mul(centered, repeat_hw(inv_std, (h, w)))
    return add(mul(normalized, _per_channel(style_scale, n, (h, w))),
               _per_channel(style_bias, n, (h, w)))


def inject_noise(x, noise, scale) -> Tensor:
    """Add a single-channel noise image scaled per feature channel.

    y[n,c,h,w] = x[n,c,h,w] + scale[c] * noise[n,0,h,w]
    """
    x, noise, scale = as_tensor(x), as_tensor(noise), as_tensor(scale)
    n, c, h, w = x.shape
    if noise.shape != (n, 1, h, w):
        raise ShapeError(f"inject_noise: noise {noise.shape} does not match "
                         f"features {x.shape}")
    if scale.shape != (c,):
        raise ShapeError(f"inject_noise: scale {scale.shape} does not match "
                         f"channels of {x.shape}")
    return add(x, mul(repeat_chan(noise, c), _per_channel(scale, n, (h, w))))


# ---------------------------------------------------------------------------
# the tape walk
# ---------------------------------------------------------------------------

def trace(root: Tensor) -> list:
    """Return the recorded tape below ``root`` in topological order.

    Every node's parents appear before the node itself. Constant tensors
    (no gradient requirement) never enter the tape.
    """
    if not root.requires_grad:
        return []
    order: list = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                if not isinstance(p, Tensor):
                    raise GraphError("tape node references a non-tensor input")
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor, params=None, create_graph: bool = False) -> dict:
    """Reverse-sweep the tape from a scalar loss.

    Returns a dict mapping parameter tensors to their gradients. With
    ``params`` given, every listed parameter gets an entry -- zeros when it
    is not reachable from the loss. Otherwise all reachable leaves are
    returned. ``create_graph=True`` records the sweep itself on the tape so
    the result can be differentiated again.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Tensor] = {}
    keep: dict[int, Tensor] = {}
    if loss.requires_grad:
        order = trace(loss)
        grads[id(loss)] = Tensor(np.ones_like(loss.data))
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None:
                    continue
                if node._vjp is None:
                    keep[id(node)] = node  # leaf
                    continue
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
                del grads[id(node)]  # interior grads are not reported
    if params is None:
        return {t: grads[i] for i, t in keep.items()}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = g if g is not None else Tensor(np.zeros_like(p.data))
    return out


def grad(loss: Tensor, params, create_graph: bool = False) -> list:
    """Gradient of a scalar loss w.r.t. an ordered parameter list."""
    table = backward(loss, params=list(params), create_graph=create_graph)
    return [table[p] for p in params]


def check_finite(t: Tensor, what: str = "value"):
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite {what} encountered")
    return t
