"""Dense N-D tensors with a dynamically recorded reverse-mode autodiff graph.

Every differentiable operation returns a new :class:`Tensor` whose
``_backward`` closure maps the upstream gradient to one gradient per parent.
Buffers are never mutated by operations; only ``Tensor.grad`` is written, and
only on leaves during :func:`backward`.

Layout convention for images is (N, C, H, W), row-major.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .exceptions import AxisError, RankError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
# op name -> multiplicative error injected into its backward rule (test hook)
_backward_faults: dict[str, float] = {}


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_backward_fault(op_name: str, scale: float = 1.05):
    """Scale the gradients produced by ``op_name``'s backward rule.

    Only meant for checking that the gradient suite detects a broken rule.
    """
    _backward_faults[op_name] = scale
    try:
        yield
    finally:
        _backward_faults.pop(op_name, None)


class Tensor:
    """N-D float array plus autodiff bookkeeping.

    Leaves (parameters, inputs) have no ``_backward``; intermediate results
    keep references to their parents until they are garbage collected.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> Tensor:
        return _unary("astype", self, self.data.astype(dtype), lambda g: g)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", -self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        if isinstance(other, Tensor):
            return elementwise("div", other, self)
        return elementwise("mul", reciprocal(self), other)

    def __neg__(self):
        return _unary("neg", self, -self.data, lambda g: -g)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce("min", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unary(op, x: Tensor, data, grad_fn) -> Tensor:
    return _make(op, data, (x,), lambda g: (grad_fn(g),))


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------

def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def create(
    shape,
    init: str = "zeros",
    *,
    low: float = 0.0,
    high: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    data=None,
    seed=None,
    dtype=None,
    requires_grad: bool = False,
) -> Tensor:
    """Create a leaf tensor.

    ``init`` is one of ``zeros``, ``ones``, ``uniform`` (``low``, ``high``),
    ``normal`` (``mean``, ``std``) or ``explicit`` (``data``). Random policies
    are deterministic for a given ``seed`` (int or ``np.random.Generator``).
    """
    shape = _check_shape(shape)
    dtype = dtype or DEFAULT_DTYPE
    if init == "zeros":
        arr = np.zeros(shape, dtype=dtype)
    elif init == "ones":
        arr = np.ones(shape, dtype=dtype)
    elif init in ("uniform", "normal"):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        if init == "uniform":
            arr = rng.uniform(low, high, size=shape).astype(dtype)
        else:
            arr = rng.normal(mean, std, size=shape).astype(dtype)
    elif init == "explicit":
        flat = np.asarray(data, dtype=dtype).ravel()
        if flat.size != int(np.prod(shape)):
            raise ShapeError(
                f"length mismatch: shape {shape} needs {int(np.prod(shape))} values, got {flat.size}"
            )
        arr = flat.reshape(shape).copy()
    else:
        raise ValueError(f"unknown init policy {init!r}")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return create(shape, "zeros", dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return create(shape, "ones", dtype=dtype, requires_grad=requires_grad)


def tensor(data, dtype=None, requires_grad=False) -> Tensor:
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _is_scalar(b) -> bool:
    if isinstance(b, Tensor):
        return b.ndim == 0
    return np.ndim(b) == 0


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """``a <op> b`` for equal shapes, or with ``b`` a scalar (number or 0-d tensor).

    Division by zero follows IEEE semantics.
    """
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape and not _is_scalar(b):
            raise ShapeError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
    elif not _is_scalar(b):
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
        b = Tensor(b.astype(a.dtype))
    scalar_b = _is_scalar(b)
    b_tensor = b if isinstance(b, Tensor) else None
    bv = b.data if b_tensor is not None else b

    with np.errstate(divide="ignore", invalid="ignore"):
        if op_kind == "add":
            out = a.data + bv
        elif op_kind == "sub":
            out = a.data - bv
        elif op_kind == "mul":
            out = a.data * bv
        elif op_kind == "div":
            out = a.data / bv
        else:
            raise ValueError(f"unknown elementwise op {op_kind!r}")
    if out.dtype != a.dtype and b_tensor is None:
        out = out.astype(a.dtype)

    def fold(g):
        # reduce gradient onto a scalar b
        return np.asarray(g.sum()).reshape(b_tensor.shape) if scalar_b else g

    def bw(g):
        if op_kind == "add":
            ga, gb = g, (fold(g) if b_tensor is not None else None)
        elif op_kind == "sub":
            ga, gb = g, (fold(-g) if b_tensor is not None else None)
        elif op_kind == "mul":
            ga = g * bv
            gb = fold(g * a.data) if b_tensor is not None else None
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                ga = g / bv
                gb = fold(-g * a.data / (bv * bv)) if b_tensor is not None else None
        return (ga, gb) if b_tensor is not None else (ga,)

    parents = (a, b_tensor) if b_tensor is not None else (a,)
    return _make(op_kind, out, parents, bw)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        y = 1.0 / x.data
    return _unary("reciprocal", x, y.astype(x.dtype), lambda g: -g * y * y)


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    y = x.data ** p
    return _unary("pow", x, y, lambda g: g * p * x.data ** (p - 1))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _unary("exp", x, y, lambda g: g * y)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _unary("log", x, y, lambda g: g / x.data)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _unary("sqrt", x, y, lambda g: g * 0.5 / y)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _unary("tanh", x, y, lambda g: g * (1.0 - y * y))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary("relu", x, np.where(mask, x.data, 0).astype(x.dtype), lambda g: g * mask)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so float32 outputs stay strictly inside (0, 1)."""
    info = np.finfo(x.dtype)
    y = np.clip(special.expit(x.data), info.tiny, 1.0 - info.epsneg).astype(x.dtype)
    return _unary("sigmoid", x, y, lambda g: g * y * (1.0 - y))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    y = (x.data * cdf).astype(x.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return g * (cdf + x.data * pdf)

    return _unary("gelu", x, y, bw)


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shape mismatch {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _make("minimum", out, (a, b), lambda g: (g * take_a, g * ~take_a))


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shape mismatch {a.shape} vs {b.shape}")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make("maximum", out, (a, b), lambda g: (g * take_a, g * ~take_a))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical on both operands, or ``b`` is a
    plain 2-D matrix shared across the batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} x {b.shape}")
    shared_b = b.ndim == 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch-dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared_b:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = np.matmul(x.data, weight.data)
    if bias is not None:
        out = out + bias.data
    k, n = weight.shape

    def bw(g):
        gx = np.matmul(g, weight.data.T)
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, n)
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, n).sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, parents, bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(op_kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max / min over ``axis`` (None = all axes).

    max and min send the whole gradient to the first extremum in row-major
    iteration order over the reduced axes.
    """
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    if op_kind in ("sum", "mean"):
        out = a.data.sum(axis=axes, keepdims=keepdims)
        if op_kind == "mean":
            out = out / count
        out = np.asarray(out, dtype=a.dtype)
        scale = 1.0 if op_kind == "sum" else 1.0 / count

        def bw(g):
            g = np.asarray(g).reshape(kept_shape)
            return (np.broadcast_to(g * scale, a.shape).astype(a.dtype),)

        return _make(op_kind, out, (a,), bw)

    if op_kind not in ("max", "min"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    rest = [i for i in range(a.ndim) if i not in axes]
    perm = rest + list(axes)
    moved = np.transpose(a.data, perm)
    lead = moved.shape[: len(rest)]
    flat = moved.reshape(lead + (count,))
    idx = flat.argmax(axis=-1) if op_kind == "max" else flat.argmin(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals.reshape(kept_shape) if keepdims else vals
    out = np.asarray(out, dtype=a.dtype)

    def bw(g):
        g = np.asarray(g).reshape(lead)
        gflat = np.zeros(lead + (count,), dtype=a.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), np.argsort(perm)),)

    return _make(op_kind, out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-shifted) along ``axis``."""
    (ax,) = _norm_axes(axis, a.ndim)
    y = a.data - a.data.max(axis=ax, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=ax, keepdims=True)

    def bw(g):
        out = g - np.einsum("...i,...i->...", g, y)[..., None] if ax == a.ndim - 1 else (
            g - (g * y).sum(axis=ax, keepdims=True)
        )
        out *= y
        return (out,)

    return _make("softmax", y, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    src = a.shape
    return _unary("reshape", a, out, lambda g: g.reshape(src))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _unary("transpose", a, np.transpose(a.data, axes), lambda g: np.transpose(g, inv))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the backward pass sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _make("broadcast_to", out, (a,), bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Indexing (basic slices or integer-array gather)."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = a.data[index]
    basic = _is_basic_index(index)
    if basic:
        out = out.copy()

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.asarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty sequence")
    (ax,) = _norm_axes(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, tensors, bw)


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad needs {a.ndim} width pairs, got {len(widths)}")
    out = np.pad(a.data, widths)
    crop = tuple(slice(b, b + s) for (b, _), s in zip(widths, a.shape))
    return _unary("pad", a, out, lambda g: g[crop])


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    neg = tuple(-s for s in shifts)
    return _unary("roll", a, np.roll(a.data, shifts, axes), lambda g: np.roll(g, neg, axes))


# ---------------------------------------------------------------------------
# image primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, (N,C,H,W) * (O,C,kh,kw) -> (N,O,H',W').

    Computed as a sum of kh*kw shifted matrix products, which avoids
    materialising the full im2col buffer at large resolutions.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    s, p = int(stride), int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    def window(arr, u, v):
        return arr[:, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s]

    acc = np.zeros((o, n, ho, wo), dtype=np.result_type(x.data, weight.data))
    for u in range(kh):
        for v in range(kw):
            acc += np.tensordot(weight.data[:, :, u, v], window(xp, u, v), axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)  # (O, N, Ho, Wo)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for u in range(kh):
            for v in range(kw):
                win = window(xp, u, v)
                gw[:, :, u, v] = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
                window(gxp, u, v)[...] += np.tensordot(
                    weight.data[:, :, u, v], gt, axes=([0], [0])
                ).transpose(1, 0, 2, 3)
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out, parents, bw)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear 1-D resampling matrix (n_out, n_in), align_corners=False."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` (align_corners=False)."""
    h, w = x.shape[-2:]
    oh, ow = int(size[0]), int(size[1])
    mh = interpolation_matrix(h, oh, x.dtype)
    mw = interpolation_matrix(w, ow, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _make("resize_bilinear", out, (x,), bw)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 4):
        raise ValueError(f"upsample factor must be 2 or 4, got {factor}")
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float,
    use_batch_stats: bool,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalisation of (N,C,H,W); returns (out, batch_mean, batch_var).

    With ``use_batch_stats`` the biased batch variance normalises the input
    and the supplied ``mean``/``var`` are ignored.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if use_batch_stats:
        mu = x.data.mean(axis=axes)
        var_b = x.data.var(axis=axes)
    else:
        mu, var_b = np.asarray(mean, x.dtype), np.asarray(var, x.dtype)
    inv = 1.0 / np.sqrt(var_b + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = (xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)).astype(x.dtype)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    def bw(g):
        gg = g.sum(axis=axes)
        gxh = g * gamma.data.reshape(shape)
        ggamma = (g * xhat).sum(axis=axes)
        if use_batch_stats:
            gx = (inv.reshape(shape) / m) * (
                m * gxh
                - gxh.sum(axis=axes, keepdims=True)
                - xhat * (gxh * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxh * inv.reshape(shape)
        return gx, ggamma, gg

    return _make("batch_norm", out, (x, gamma, beta), bw), mu, var_b


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalise over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)
    d = x.shape[-1]

    def bw(g):
        gxh = g * gamma.data
        gx = (inv / d) * (
            d * gxh - gxh.sum(axis=-1, keepdims=True) - xhat * (gxh * xhat).sum(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make("layer_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise RankError(f"backward needs a scalar (one-element) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones(loss.shape, dtype=loss.dtype) if grad is None else np.asarray(grad, loss.dtype)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        fault = _backward_faults.get(node.op)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if fault is not None:
                pg = pg * fault
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
