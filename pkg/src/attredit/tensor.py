"""Dense n-d tensors with reverse-mode automatic differentiation.

Everything the networks need lives here: elementwise math, matmul,
channel concat/slice, 2-d convolution and its transpose, instance
normalization, and the backward engine.  Backward rules are themselves
written in terms of these differentiable ops, so differentiating through
a gradient (as the critic's gradient penalty requires) falls out of the
same machinery: call :func:`grad_of` with ``create_graph=True`` and the
returned gradients carry their own graph.

Layout is fixed to (batch, channel, height, width) for image-like data.
Binary ops require equal shapes; the only implicit broadcast is a 0-d
scalar.  Anything else must go through :func:`broadcast_to` explicitly,
so shape bugs surface as errors instead of silent misbehavior.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "Parameter", "no_grad", "is_grad_enabled", "set_debug_checks",
    "tensor", "constant", "add", "sub", "mul", "div", "neg", "exp", "log",
    "sqrt", "absolute", "clip", "sigmoid", "tanh", "relu", "leaky_relu",
    "reshape", "transpose2d", "broadcast_to", "tsum", "tmean", "matmul",
    "concat_channels", "slice_channels", "pad2d", "crop2d", "getitem",
    "conv2d", "conv_transpose2d", "fully_connected", "instance_norm",
    "grad_of", "backward", "zero_grad", "set_requires_grad",
]

_state = threading.local()
_debug_checks = False


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (fast inference path)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def set_debug_checks(flag: bool) -> None:
    """When on, every op verifies its output is finite (slow; tests only)."""
    global _debug_checks
    _debug_checks = bool(flag)


class Tensor:
    """A numpy array plus the bookkeeping needed to replay adjoints.

    The graph is the tape: each non-leaf tensor records its parents and a
    closure computing parent gradients from its own.  ``backward`` walks
    that record in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None

    # -- introspection -------------------------------------------------
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

    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

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


class Parameter(Tensor):
    """A named, trainable leaf tensor (requires_grad is always true)."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------
# graph construction helpers
# ---------------------------------------------------------------------

def _node(data: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise ContractError("non-finite values produced by a forward op")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed dtypes in one op: {sorted(map(str, dtypes))}")


def _binary_mode(a: Tensor, b: Tensor) -> str:
    if a.data.shape == b.data.shape:
        return "same"
    if a.data.ndim == 0:
        return "a_scalar"
    if b.data.ndim == 0:
        return "b_scalar"
    raise DimensionError(
        f"shape mismatch {a.data.shape} vs {b.data.shape}; only 0-d scalars broadcast implicitly")


def _reduce_to(g: Tensor, mode: str, side: str) -> Tensor:
    # collapse the gradient of a 0-d operand back to 0-d
    if mode == f"{side}_scalar":
        return tsum(g)
    return g


# ---------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    mode = _binary_mode(a, b)

    def gfn(g):
        ga = _reduce_to(g, mode, "a") if a.requires_grad else None
        gb = _reduce_to(g, mode, "b") if b.requires_grad else None
        return ga, gb

    return _node(a.data + b.data, (a, b), gfn)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    mode = _binary_mode(a, b)

    def gfn(g):
        ga = _reduce_to(g, mode, "a") if a.requires_grad else None
        gb = _reduce_to(neg(g), mode, "b") if b.requires_grad else None
        return ga, gb

    return _node(a.data - b.data, (a, b), gfn)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    mode = _binary_mode(a, b)

    def gfn(g):
        ga = _reduce_to(mul(g, b), mode, "a") if a.requires_grad else None
        gb = _reduce_to(mul(g, a), mode, "b") if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), gfn)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    mode = _binary_mode(a, b)
    out_data = a.data / b.data

    def gfn(g):
        ga = _reduce_to(div(g, b), mode, "a") if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to(neg(div(mul(g, out), b)), mode, "b")
        return ga, gb

    out = _node(out_data, (a, b), gfn)
    return out


def neg(a: Tensor) -> Tensor:
    def gfn(g):
        return (neg(g),)

    return _node(-a.data, (a,), gfn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def gfn(g):
        return (mul(g, out),)

    out = _node(out_data, (a,), gfn)
    return out


def log(a: Tensor) -> Tensor:
    def gfn(g):
        return (div(g, a),)

    return _node(np.log(a.data), (a,), gfn)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def gfn(g):
        half = Tensor(np.asarray(0.5, dtype=a.data.dtype))
        return (div(mul(g, half), out),)

    out = _node(out_data, (a,), gfn)
    return out


def absolute(a: Tensor) -> Tensor:
    sign = Tensor(np.sign(a.data))

    def gfn(g):
        return (mul(g, sign),)

    return _node(np.abs(a.data), (a,), gfn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype))

    def gfn(g):
        return (mul(g, mask),)

    return _node(np.clip(a.data, lo, hi), (a,), gfn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    # keep the open interval (0,1) even where exp saturates
    fi = np.finfo(x.dtype)
    np.clip(out_data, fi.tiny, np.nextafter(x.dtype.type(1.0), x.dtype.type(0.0)),
            out=out_data)

    def gfn(g):
        one = Tensor(np.asarray(1.0, dtype=x.dtype))
        return (mul(g, mul(out, sub(one, out))),)

    out = _node(out_data, (a,), gfn)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.asarray(np.tanh(a.data))
    one = a.data.dtype.type(1.0)
    zero = a.data.dtype.type(0.0)
    np.clip(out_data, np.nextafter(-one, zero), np.nextafter(one, zero),
            out=out_data)

    def gfn(g):
        one_t = Tensor(np.asarray(1.0, dtype=a.data.dtype))
        return (mul(g, sub(one_t, mul(out, out))),)

    out = _node(out_data, (a,), gfn)
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.data.dtype))

    def gfn(g):
        return (mul(g, mask),)

    return _node(np.maximum(a.data, 0), (a,), gfn)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    mask_data = np.where(a.data > 0, np.asarray(1.0, a.data.dtype),
                         np.asarray(alpha, a.data.dtype))
    mask = Tensor(mask_data)

    def gfn(g):
        return (mul(g, mask),)

    return _node(a.data * mask_data, (a,), gfn)


# ---------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def gfn(g):
        return (reshape(g, old),)

    return _node(np.ascontiguousarray(a.data).reshape(shape), (a,), gfn)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose2d expects a 2-d tensor")

    def gfn(g):
        return (transpose2d(g),)

    return _node(np.ascontiguousarray(a.data.T), (a,), gfn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    shape = tuple(shape)
    old = a.data.shape
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {old} to {shape}") from e

    lead = len(shape) - len(old)
    expanded = tuple(i + lead for i, (o, n) in
                     enumerate(zip(old, shape[lead:])) if o == 1 and n != 1)

    def gfn(g):
        gd = g
        if lead:
            gd = tsum(gd, axis=tuple(range(lead)))
        if expanded:
            ax = tuple(i - lead for i in expanded)
            gd = tsum(gd, axis=ax, keepdims=True)
        if gd.data.shape != old:
            gd = reshape(gd, old)
        return (gd,)

    return _node(np.ascontiguousarray(out_data), (a,), gfn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    old = a.data.shape

    def gfn(g):
        gd = g
        if not keepdims:
            if axis is None:
                gd = reshape(gd, (1,) * len(old)) if old else gd
            else:
                kshape = tuple(1 if i in axis else s for i, s in enumerate(old))
                gd = reshape(gd, kshape)
        return (broadcast_to(gd, old),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), gfn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    n = a.data.size if axis is None else int(np.prod([a.data.shape[i] for i in axis]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.data.dtype)))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (int/slice) indexing with a scatter adjoint."""
    out_data = a.data[idx]
    if out_data.base is not None or np.isscalar(out_data):
        out_data = np.array(out_data, dtype=a.data.dtype)
    shape = a.data.shape

    def gfn(g):
        def scatter(gt):
            buf = np.zeros(shape, dtype=gt.data.dtype)
            buf[idx] = gt.data
            return buf
        return (_linear_wrap(g, scatter, lambda ht: ht.data[idx]),)

    return _node(out_data, (a,), gfn)


def _linear_wrap(g: Tensor, fwd, adj) -> Tensor:
    """Wrap a linear numpy map so its adjoint is available for one more
    differentiation level (sufficient for every second-order use here)."""

    def gfn(h):
        return (_linear_wrap(h, adj, fwd),)

    return _node(fwd(g), (g,), gfn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects 4-d tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise DimensionError(
            f"batch/spatial mismatch {a.data.shape} vs {b.data.shape}")
    _check_dtypes(a, b)
    ca = a.data.shape[1]
    cb = b.data.shape[1]

    def gfn(g):
        ga = slice_channels(g, 0, ca) if a.requires_grad else None
        gb = slice_channels(g, ca, ca + cb) if b.requires_grad else None
        return ga, gb

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), gfn)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise DimensionError("slice_channels expects a 4-d tensor")
    c = a.data.shape[1]
    if not (0 <= start < stop <= c):
        raise DimensionError(f"channel slice [{start}:{stop}) out of range for {c}")

    def gfn(g):
        before = (a.data.shape[0], start) + a.data.shape[2:]
        after = (a.data.shape[0], c - stop) + a.data.shape[2:]
        gd = g
        if start:
            gd = concat_channels(Tensor(np.zeros(before, dtype=g.data.dtype)), gd)
        if c - stop:
            gd = concat_channels(gd, Tensor(np.zeros(after, dtype=g.data.dtype)))
        return (gd,)

    return _node(np.ascontiguousarray(a.data[:, start:stop]), (a,), gfn)


def pad2d(a: Tensor, padding: int) -> Tensor:
    if a.data.ndim != 4:
        raise DimensionError("pad2d expects a 4-d tensor")
    p = int(padding)

    def gfn(g):
        return (crop2d(g, p),)

    out_data = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    return _node(out_data, (a,), gfn)


def crop2d(a: Tensor, padding: int) -> Tensor:
    if a.data.ndim != 4:
        raise DimensionError("crop2d expects a 4-d tensor")
    p = int(padding)

    def gfn(g):
        return (pad2d(g, p),)

    out_data = np.ascontiguousarray(a.data[:, :, p:a.data.shape[2] - p, p:a.data.shape[3] - p])
    return _node(out_data, (a,), gfn)


# ---------------------------------------------------------------------
# matmul / affine
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"inner dims differ: {a.data.shape} @ {b.data.shape}")
    _check_dtypes(a, b)

    def gfn(g):
        ga = matmul(g, transpose2d(b)) if a.requires_grad else None
        gb = matmul(transpose2d(a), g) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), gfn)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: x (batch, in) with weight (out, in) and bias (out,)."""
    if x.data.ndim != 2:
        raise DimensionError("fully_connected expects (batch, features) input")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise DimensionError(
            f"feature count mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    out = matmul(x, transpose2d(weight))
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError("bias must be (out_features,)")
        out = add(out, broadcast_to(reshape(bias, (1, -1)), out.data.shape))
    return out


# ---------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    # (N,C,HP,WP) -> (N*oh*ow, C*k*k); one big copy, BLAS-friendly
    v = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0] * oh * ow, -1)


def _col2im(cols: np.ndarray, out_shape, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    # adjoint of _im2col; k*k vectorized slice-adds instead of np.add.at
    n, c, hp, wp = out_shape
    xp = np.zeros(out_shape, dtype=cols.dtype)
    cols_t = np.ascontiguousarray(
        cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2))
    for i in range(k):
        hi = i + s * (oh - 1) + 1
        for j in range(k):
            wj = j + s * (ow - 1) + 1
            xp[:, :, i:hi:s, j:wj:s] += cols_t[:, :, i, j]
    return xp


def _conv_geometry(h: int, w: int, k: int, s: int, p: int):
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {k} does not fit input {h}x{w} with pad {p}")
    return oh, ow


def _check_conv_args(stride: int, padding: int) -> None:
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if padding < 0:
        raise ContractError("padding must be >= 0")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, weight (out_ch, in_ch, k, k)."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4:
        raise DimensionError("conv2d expects a 4-d input")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise DimensionError("conv2d weight must be (out_ch, in_ch, k, k)")
    n, c, h, w = x.data.shape
    o, ci, k, _ = weight.data.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels, weight expects {ci}")
    _check_dtypes(x, weight, *((bias,) if bias is not None else ()))
    oh, ow = _conv_geometry(h, w, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    out_data = cols @ weight.data.reshape(o, -1).T
    out_data = np.ascontiguousarray(
        out_data.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    if bias is not None:
        if bias.data.shape != (o,):
            raise DimensionError("conv2d bias must be (out_ch,)")
        out_data += bias.data.reshape(1, o, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def gfn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = conv_transpose2d(g, weight, stride=stride, padding=padding,
                                  out_hw=(h, w))
        if weight.requires_grad:
            gw = _conv_weight_grad(x, g, stride, padding, weight.data.shape,
                                   cols_hint=cols)
        if bias is not None and bias.requires_grad:
            gb = tsum(g, axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out_data, parents, gfn)


def conv_transpose2d(y: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0,
                     out_hw: Optional[tuple] = None) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with the same weight.

    weight stays (out_ch, in_ch, k, k) in conv2d's orientation; the input
    here carries out_ch channels and the result carries in_ch.  ``out_hw``
    disambiguates sizes conv2d collapses (defaults to (H-1)*s - 2p + k).
    """
    _check_conv_args(stride, padding)
    if y.data.ndim != 4:
        raise DimensionError("conv_transpose2d expects a 4-d input")
    n, o, h, w = y.data.shape
    ow_, ci, k, _ = weight.data.shape
    if ow_ != o:
        raise DimensionError(f"input has {o} channels, weight expects {ow_}")
    _check_dtypes(y, weight, *((bias,) if bias is not None else ()))
    if out_hw is None:
        out_hw = ((h - 1) * stride - 2 * padding + k,
                  (w - 1) * stride - 2 * padding + k)
    oh, ow = out_hw
    if _conv_geometry(oh, ow, k, stride, padding) != (h, w):
        raise ContractError(f"out_hw {out_hw} is not consistent with input {h}x{w}")

    cols = y.data.transpose(0, 2, 3, 1).reshape(n * h * w, o) @ weight.data.reshape(o, -1)
    xp = _col2im(cols, (n, ci, oh + 2 * padding, ow + 2 * padding), k, stride, h, w)
    out_data = xp[:, :, padding:padding + oh, padding:padding + ow] if padding \
        else xp
    out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        if bias.data.shape != (ci,):
            raise DimensionError("conv_transpose2d bias must be (in_ch,)")
        out_data += bias.data.reshape(1, ci, 1, 1)

    parents = (y, weight) if bias is None else (y, weight, bias)

    def gfn(g):
        gy = gw = gb = None
        if y.requires_grad:
            gy = conv2d(g, weight, stride=stride, padding=padding)
        if weight.requires_grad:
            gw = _conv_weight_grad(g, y, stride, padding, weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = tsum(g, axis=(0, 2, 3))
        return (gy, gw) if bias is None else (gy, gw, gb)

    return _node(out_data, parents, gfn)


def _conv_weight_grad(x: Tensor, g: Tensor, stride: int, padding: int,
                      wshape, cols_hint: Optional[np.ndarray] = None) -> Tensor:
    """Gradient of conv2d w.r.t. its weight, as a differentiable op."""
    n, c, h, w = x.data.shape
    o, _, k, _ = wshape
    oh, ow = _conv_geometry(h, w, k, stride, padding)
    if cols_hint is not None:
        cols = cols_hint
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else x.data
        cols = _im2col(xp, k, stride, oh, ow)
    gmat = g.data.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    out_data = (gmat.T @ cols).reshape(wshape)

    def gfn(u):
        gx = gg = None
        if x.requires_grad:
            gx = conv_transpose2d(g.detach() if not g.requires_grad else g,
                                  u, stride=stride, padding=padding, out_hw=(h, w))
        if g.requires_grad:
            gg = conv2d(x.detach() if not x.requires_grad else x,
                        u, stride=stride, padding=padding)
        return gx, gg

    return _node(out_data, (x, g), gfn)


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization followed by an affine map.

    Composed from primitive ops, so the adjoint (and anything beyond)
    needs no hand-derived rule.
    """
    if x.data.ndim != 4:
        raise DimensionError("instance_norm expects a 4-d input")
    c = x.data.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise DimensionError("scale/shift must be (channels,)")
    mu = tmean(x, axis=(2, 3), keepdims=True)
    xc = sub(x, broadcast_to(mu, x.data.shape))
    var = tmean(mul(xc, xc), axis=(2, 3), keepdims=True)
    eps_t = Tensor(np.asarray(eps, dtype=x.data.dtype))
    den = sqrt(add(var, eps_t))
    xn = div(xc, broadcast_to(den, x.data.shape))
    sc = broadcast_to(reshape(scale, (1, c, 1, 1)), x.data.shape)
    sh = broadcast_to(reshape(shift, (1, c, 1, 1)), x.data.shape)
    return add(mul(xn, sc), sh)


# ---------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede consumers


def grad_of(output: Tensor, inputs: Sequence[Tensor],
            create_graph: bool = False) -> list:
    """Gradients of a scalar output w.r.t. ``inputs``.

    Does not touch ``.grad``.  With ``create_graph`` the returned tensors
    carry their own graph, so they can be differentiated again.
    """
    if output.data.size != 1:
        raise ContractError("grad_of requires a scalar output")
    wanted = {id(t) for t in inputs}
    seed = Tensor(np.ones_like(output.data))
    gmap = {id(output): seed}
    results: dict = {}
    if id(output) in wanted:
        results[id(output)] = seed
    order = _topo_order(output)

    @contextmanager
    def _mode():
        if create_graph:
            yield
        else:
            with no_grad():
                yield

    with _mode():
        for node in reversed(order):
            g = gmap.pop(id(node), None)
            if g is None or node._grad_fn is None:
                continue
            pgrads = node._grad_fn(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                acc = gmap.get(pid)
                gmap[pid] = pg if acc is None else add(acc, pg)
                if pid in wanted:
                    results[pid] = gmap[pid]
    out = []
    for t in inputs:
        got = results.get(id(t))
        if got is None:
            got = Tensor(np.zeros_like(t.data))
        out.append(got)
    return out


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every reachable
    requires-grad leaf's ``.grad`` (repeat calls keep accumulating)."""
    if root.data.size != 1:
        raise ContractError("backward requires a scalar root")
    leaves = [t for t in _topo_order(root)
              if t._grad_fn is None and t.requires_grad]
    grads = grad_of(root, leaves, create_graph=False)
    for leaf, g in zip(leaves, grads):
        if _debug_checks and not np.all(np.isfinite(g.data)):
            raise ContractError("non-finite gradient produced by backward")
        if leaf.grad is None:
            leaf.grad = g.data.copy()
        else:
            leaf.grad += g.data


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def set_requires_grad(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
