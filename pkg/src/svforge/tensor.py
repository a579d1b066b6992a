"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Only the operations needed by the encoder, heads, losses and pruning code are
provided. Binary elementwise ops accept identical shapes or leading-batch
expansion (one shape is a suffix of the other); anything else must go through
:func:`expand` explicitly.
"""

from __future__ import annotations

import functools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised on misuse of the backward pass."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_replay", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=DTYPE):
        arr = np.array(data, dtype=dtype) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._replay = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff --------------------------------------------------------
    def backward(self):
        backward(self)

    # -- operator sugar --------------------------------------------------
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

    def __getitem__(self, idx):
        return index(self, idx=idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes=axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, axes=tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


# -- op registration -------------------------------------------------------

def _op(name: str):
    """Register a differentiable op.

    The wrapped function receives the raw arrays of its tensor arguments
    (positional) plus keyword options, and returns ``(out, backward)`` where
    ``backward(g)`` yields one gradient array (or None) per tensor input.
    """

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            ts = tuple(a if isinstance(a, Tensor) else Tensor(a) for a in args)
            out, bwd = fn(*(t.data for t in ts), **kwargs)
            res = Tensor(out)
            res._op = name
            if is_grad_enabled() and any(t.requires_grad for t in ts):
                res.requires_grad = True
                res._parents = ts
                res._backward = bwd
                res._replay = lambda *arrays: fn(*arrays, **kwargs)[0]
            return res

        wrapper.op_name = name
        return wrapper

    return deco


def _check_expand(sa: tuple, sb: tuple, opname: str):
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb} (only leading-batch expansion allowed)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


# -- elementwise binary ------------------------------------------------------

@_op("add")
def add(a, b):
    _check_expand(a.shape, b.shape, "add")
    return a + b, lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))


@_op("sub")
def sub(a, b):
    _check_expand(a.shape, b.shape, "sub")
    return a - b, lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))


@_op("mul")
def mul(a, b):
    _check_expand(a.shape, b.shape, "mul")
    return a * b, lambda g: (_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape))


@_op("div")
def div(a, b):
    _check_expand(a.shape, b.shape, "div")
    out = a / b
    return out, lambda g: (_reduce_to(g / b, a.shape), _reduce_to(-g * out / b, b.shape))


@_op("where")
def where(a, b, *, cond):
    cond = np.asarray(cond, dtype=bool)
    if not (a.shape == b.shape == cond.shape):
        raise ShapeError(f"where: shapes {cond.shape}, {a.shape}, {b.shape} must agree")
    return np.where(cond, a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g))


# -- elementwise unary -------------------------------------------------------

@_op("neg")
def neg(x):
    return -x, lambda g: (-g,)


@_op("exp")
def exp(x):
    y = np.exp(x)
    return y, lambda g: (g * y,)


@_op("log")
def log(x):
    return np.log(x), lambda g: (g / x,)


@_op("sqrt")
def sqrt(x):
    y = np.sqrt(x)
    return y, lambda g: (g * 0.5 / y,)


@_op("abs")
def abs(x):
    return np.abs(x), lambda g: (g * np.sign(x),)


@_op("square")
def square(x):
    return x * x, lambda g: (2.0 * g * x,)


@_op("tanh")
def tanh(x):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_op("sigmoid")
def sigmoid(x):
    y = _sigmoid(x)
    return y, lambda g: (g * y * (1.0 - y),)


@_op("relu")
def relu(x):
    mask = x > 0
    return x * mask, lambda g: (g * mask,)


@_op("swish")
def swish(x):
    s = _sigmoid(x)
    y = x * s
    return y, lambda g: (g * (s + y * (1.0 - s)),)


@_op("clamp")
def clamp(x, *, lo=None, hi=None):
    y = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x > lo
    if hi is not None:
        mask &= x < hi
    return y, lambda g: (g * mask,)


@_op("scale")
def scale(x, *, c: float):
    return x * c, lambda g: (g * c,)


@_op("dropout_mask")
def _apply_mask(x, *, mask):
    return x * mask, lambda g: (g * mask,)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return _apply_mask(x, mask=keep / (1.0 - p))


@_op("glu")
def glu(x, *, axis=-1):
    """Split ``x`` in half along ``axis``: first half * sigmoid(second half)."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis size {n} is odd")
    a, b = np.split(x, 2, axis=axis)
    s = _sigmoid(b)

    def bwd(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return a * s, bwd


# -- linear algebra ----------------------------------------------------------

@_op("matmul")
def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        _check_expand(a.shape[:-2], b.shape[:-2], "matmul batch")
    out = a @ b

    def bwd(g):
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return out, bwd


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_op("sum")
def sum(x, *, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, bwd


@_op("mean")
def mean(x, *, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return out, bwd


@_op("var")
def var(x, *, axis=-1, keepdims=False):
    """Biased variance."""
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    out = (xc * xc).mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * 2.0 * xc / n,)

    return out, bwd


# -- shape manipulation ------------------------------------------------------

@_op("reshape")
def reshape(x, *, shape):
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


@_op("transpose")
def transpose(x, *, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return np.transpose(x, axes), lambda g: (np.transpose(g, inv),)


@_op("expand")
def expand(x, *, shape):
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    out = np.broadcast_to(x, shape)
    extra = len(shape) - x.ndim

    def bwd(g):
        g = g.sum(axis=tuple(range(extra))) if extra else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return out, bwd


@_op("index")
def index(x, *, idx):
    out = x[idx]
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return out, bwd


@_op("take")
def take(x, *, indices, axis=-1):
    """Gather along ``axis`` with an integer index array (any shape)."""
    indices = np.asarray(indices)
    axis = axis % x.ndim
    out = np.take(x, indices, axis=axis)

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        # move gathered axes to the front so add.at can scatter along axis
        xm = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(xm, indices, gm)
        return (full,)

    return out, bwd


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _concat(*tensors, axis=axis)


@_op("concat")
def _concat(*xs, axis=0):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or x.shape[:ax] + x.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref.shape} and {x.shape} disagree off axis {axis}")
    out = np.concatenate(xs, axis=ax)
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=ax))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _stack(*tensors, axis=axis)


@_op("stack")
def _stack(*xs, axis=0):
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"stack: shapes {xs[0].shape} and {x.shape} disagree")
    out = np.stack(xs, axis=axis)
    ax = axis % out.ndim
    return out, lambda g: tuple(np.moveaxis(g, ax, 0))


# -- fused normalisations ----------------------------------------------------

@_op("softmax")
def softmax(x, *, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@_op("log_softmax")
def log_softmax(x, *, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return y, lambda g: (g - p * g.sum(axis=axis, keepdims=True),)


LN_EPS = 1e-5


@_op("layer_norm")
def layer_norm(x, gain, bias, *, eps=LN_EPS):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match feature size {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    v = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    out = xhat * gain + bias

    def bwd(g):
        gh = g * gain
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return out, bwd


# -- distances -----------------------------------------------------------------

@_op("cosine_similarity")
def cosine_similarity(a, b, *, eps=1e-8):
    """Cosine over the last axis; the norm product is floored at ``eps``."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na2 = (a * a).sum(-1, keepdims=True)
    nb2 = (b * b).sum(-1, keepdims=True)
    dot = (a * b).sum(-1, keepdims=True)
    # sqrt of the product keeps cos(a, a) == 1 exactly
    den = np.sqrt(na2 * nb2)
    live = den > eps
    den_c = np.where(live, den, eps)
    c = dot / den_c

    def bwd(g):
        g = g[..., None]
        ga = g * (b / den_c - np.where(live, c * a / np.where(na2 > 0, na2, 1.0), 0.0))
        gb = g * (a / den_c - np.where(live, c * b / np.where(nb2 > 0, nb2, 1.0), 0.0))
        return ga, gb

    return c[..., 0], bwd


@_op("l1_distance")
def l1_distance(a, b, *, reduce="mean"):
    """Absolute difference over the last axis, averaged (``mean``) or summed."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    d = a - b
    n = a.shape[-1] if reduce == "mean" else 1
    out = np.abs(d).sum(-1) / n

    def bwd(g):
        s = np.sign(d) * (g[..., None] / n)
        return s, -s

    return out, bwd


@_op("l2_normalize")
def l2_normalize(x, *, eps=1e-12):
    n = np.sqrt((x * x).sum(-1, keepdims=True))
    if np.any(n <= eps):
        raise FloatingPointError("l2_normalize: zero-norm vector")
    y = x / n
    return y, lambda g: ((g - y * (g * y).sum(-1, keepdims=True)) / n,)


# -- convolutions ----------------------------------------------------------------

def _shift_frames(x: np.ndarray, offset: int) -> np.ndarray:
    """Return x shifted along axis 1 so out[:, t] = x[:, t + offset], zero padded."""
    T = x.shape[1]
    out = np.zeros_like(x)
    if offset >= 0:
        if offset < T:
            out[:, : T - offset] = x[:, offset:]
    elif -offset < T:
        out[:, -offset:] = x[:, : T + offset]
    return out


@_op("depthwise_conv1d")
def depthwise_conv1d(x, w, *, dilation=1):
    """Per-channel 'same' convolution over time. x: (B, T, C), w: (K, C), K odd."""
    K, C = w.shape
    if x.ndim != 3 or x.shape[-1] != C or K % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} vs kernel {w.shape} (K must be odd)")
    half = K // 2
    offs = [(k - half) * dilation for k in range(K)]
    cols = [_shift_frames(x, o) for o in offs]
    out = np.zeros_like(x)
    for k in range(K):
        out += cols[k] * w[k]

    def bwd(g):
        gx = np.zeros_like(x)
        gw = np.empty_like(w)
        for k in range(K):
            gw[k] = (g * cols[k]).sum(axis=(0, 1))
            gx += _shift_frames(g * w[k], -offs[k])
        return gx, gw

    return out, bwd


@_op("conv1d")
def conv1d(x, w, *, dilation=1):
    """Dense 'same' convolution over time. x: (B, T, Cin), w: (K, Cin, Cout), K odd."""
    K, Cin, Cout = w.shape
    if x.ndim != 3 or x.shape[-1] != Cin or K % 2 == 0:
        raise ShapeError(f"conv1d: input {x.shape} vs kernel {w.shape} (K must be odd)")
    half = K // 2
    offs = [(k - half) * dilation for k in range(K)]
    cols = np.concatenate([_shift_frames(x, o) for o in offs], axis=-1)  # (B, T, K*Cin)
    wf = w.reshape(K * Cin, Cout)
    out = cols @ wf

    def bwd(g):
        gw = (cols.reshape(-1, K * Cin).T @ g.reshape(-1, Cout)).reshape(w.shape)
        gcols = g @ wf.T
        gx = np.zeros_like(x)
        for k in range(K):
            gx += _shift_frames(gcols[..., k * Cin:(k + 1) * Cin], -offs[k])
        return gx, gw

    return out, bwd


# -- backward pass -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``.

    Leaf gradients accumulate across calls until cleared.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.shape:
                gp = gp.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


class Graph:
    """The recorded computation behind one output, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _topo_order(output)
        self.leaves = [n for n in self.nodes if n.is_leaf]

    @property
    def ops(self) -> list[str]:
        return [n._op for n in self.nodes if not n.is_leaf]

    def replay(self) -> np.ndarray:
        """Recompute every recorded op from the current leaf values.

        Non-tracked inputs (constants) are read from the recorded parents.
        """
        values: dict[int, np.ndarray] = {}
        for n in self.nodes:
            if n.is_leaf:
                values[id(n)] = n.data
            else:
                args = [values.get(id(p), p.data) for p in n._parents]
                values[id(n)] = n._replay(*args)
        return values[id(self.output)]


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# op registry for gradient-check suites
def registered_ops() -> dict[str, Callable]:
    return {
        name: obj
        for name, obj in globals().items()
        if callable(obj) and hasattr(obj, "op_name")
    }
