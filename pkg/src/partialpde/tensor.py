"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy buffers; every primitive that touches a tape-attached
input records a node with its vector-Jacobian product onto the active
gradient tape.  The tape is define-by-run: backward() replays the recorded
nodes in exact reverse order of recording, which is a valid reverse
topological order for any graph built eagerly.

Precision is a process-wide switch: float32 for training, float64 for
oracle checks (see `precision`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

_DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (64-bit for verification runs)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class TapeError(RuntimeError):
    pass


class GradientTape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self.recording = True

    def record(self, t: "Tensor") -> None:
        t._node = len(self._nodes)
        self._nodes.append(t)

    def reset(self) -> None:
        for t in self._nodes:
            t._parents = ()
            t._vjp = None
            t._node = None
        self._nodes.clear()

    def __len__(self):
        return len(self._nodes)


_TAPE = GradientTape()


def active_tape() -> GradientTape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording; results inside are detached constants."""
    prev = _TAPE.recording
    _TAPE.recording = False
    try:
        yield
    finally:
        _TAPE.recording = prev


class Tensor:
    """A dense n-dimensional array, optionally attached to the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._node: Optional[int] = None

    # -- introspection ----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def is_leaf(self) -> bool:
        return self.requires_grad and self._vjp is None

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), requires_grad=False,
                  dtype=like.data.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result; records a tape node iff some input is attached."""
    out = Tensor(data, dtype=data.dtype)
    if _TAPE.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        _TAPE.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape of the broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape) from None
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeMismatch("div", a.shape, b.shape) from None
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), vjp)


# -- nonlinearities ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch("softmax", x.shape, (axis,))
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp)


def layernorm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (no affine).

    A constant slice has zero variance and normalizes to exact zeros
    (the eps inside the root keeps the division finite).
    """
    mu = x.data.mean(axis=axis, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axis, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * r

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (r * (g - gm - y * gym),)

    return _make(y, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    y = x.data * phi

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (phi + x.data * pdf),)

    return _make(y.astype(x.dtype, copy=False), (x,), vjp)


# -- shape manipulation ------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _make(data, tensors, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, tuple(shape)) from None
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    data = x.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(data, (x,), vjp)


def getitem(x: Tensor, idx) -> Tensor:
    data = x.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=x.data.dtype)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make(data.copy(), (x,), vjp)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true; gradient is blocked there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        data = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)
    except ValueError:
        raise ShapeMismatch("masked_fill", x.shape, mask.shape) from None

    def vjp(g):
        return (np.where(mask, 0.0, g),)

    return _make(data, (x,), vjp)


# -- reductions ---------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), vjp)


# -- convolution --------------------------------------------------------------

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, pad)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """2D cross-channel convolution, stride 1, zero padding.

    x: (B, C_in, H, W); w: (C_out, C_in, kh, kw) -> (B, C_out, H', W').
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad2d(x.data, padding)
    if xp.shape[-2] < kh or xp.shape[-1] < kw:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    data = np.einsum("bchwij,ocij->bohw", patches, w.data, optimize=True)

    def vjp(g):
        gw = np.einsum("bchwij,bohw->ocij", patches, g, optimize=True)
        # grad wrt x = full correlation of g with the flipped kernel
        wflip = w.data[:, :, ::-1, ::-1].swapaxes(0, 1)  # (C_in, C_out, kh, kw)
        pad = [(0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2]
        gp = np.pad(g, pad)
        gpat = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(-2, -1))
        gx = np.einsum("bohwij,coij->bchw", gpat, wflip, optimize=True)
        return gx.astype(x.data.dtype, copy=False), gw.astype(w.data.dtype, copy=False)

    return _make(data.astype(x.data.dtype, copy=False), (x, w), vjp)


def depthwise_conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Per-channel 2D convolution, stride 1, zero padding.

    x: (B, C, H, W); w: (C, kh, kw) -> (B, C, H', W').
    Implemented as k*k shifted multiply-adds (fast for small kernels).
    """
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch("depthwise_conv2d", x.shape, w.shape)
    kh, kw = w.shape[1], w.shape[2]
    xp = _pad2d(x.data, padding)
    oh = xp.shape[-2] - kh + 1
    ow = xp.shape[-1] - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch("depthwise_conv2d", x.shape, w.shape)
    data = np.zeros(x.shape[:2] + (oh, ow), dtype=x.data.dtype)
    tmp = np.empty_like(data)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[..., i:i + oh, j:j + ow],
                        w.data[:, i, j][:, None, None], out=tmp)
            data += tmp

    def vjp(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        tmp = np.empty_like(g)
        for i in range(kh):
            for j in range(kw):
                sl = xp[..., i:i + oh, j:j + ow]
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, sl, optimize=True)
                np.multiply(g, w.data[:, i, j][:, None, None], out=tmp)
                gxp[..., i:i + oh, j:j + ow] += tmp
        if padding:
            gxp = gxp[..., padding:-padding, padding:-padding]
        return gxp, gw

    return _make(data, (x, w), vjp)


# -- backward -----------------------------------------------------------------

def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss through the active tape.

    Returns a map {leaf tensor: gradient array}; every tape-attached leaf
    appears, with zeros when unreachable from the loss.  The tape is reset.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._node is None:
        raise TapeError("loss is not attached to the gradient tape")

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    leaves: dict[int, Tensor] = {}
    nodes = _TAPE._nodes
    for t in nodes:
        for p in t._parents:
            if p.is_leaf():
                leaves[id(p)] = p

    for t in reversed(nodes):
        g = grads.pop(id(t), None)
        if g is None or t._vjp is None:
            continue
        parent_grads = t._vjp(g)
        for p, pg in zip(t._parents, parent_grads):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            acc = grads.get(id(p))
            # out-of-place: vjps may hand the same array to several parents
            grads[id(p)] = pg if acc is None else acc + pg

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        result[leaf] = g
    _TAPE.reset()
    return result
