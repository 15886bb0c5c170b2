"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` replays the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

MAGIC = b"TDSN"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float32"`` or ``"float64"``)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._vjp = vjp if needs else None
        return out

    @staticmethod
    def zeros(*shape, requires_grad=False, dtype=None) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)

    @staticmethod
    def ones(*shape, requires_grad=False, dtype=None) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)

    # -- properties -----------------------------------------------------------
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
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        if grad is None:
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children; each node appears once."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# -- broadcasting ---------------------------------------------------------------

def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
        out.append(max(da, db) if min(da, db) != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    broadcast_shape(a.shape, b.shape)
    return a, b


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def vjp(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), vjp, "div")


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch a binary elementwise op by tag: add, sub, mul, div."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op](a, b)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    return Tensor._make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input lies inside [lo, hi]."""
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return Tensor._make(out, (a,), lambda g: (g * mask,), "clamp")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the (constant) boolean ``cond`` holds, else ``b``."""
    a, b = _binary(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        return (unbroadcast(np.where(cond, g, 0), a.shape),
                unbroadcast(np.where(cond, 0, g), b.shape))

    return Tensor._make(out, (a, b), vjp, "where")


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) axes broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), vjp, "matmul")


# -- reductions -----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _check_nonempty(x: np.ndarray, axes: tuple[int, ...]) -> None:
    for ax in axes:
        if x.shape[ax] == 0:
            raise ShapeError(f"reduction over empty axis {ax} of shape {x.shape}")
    if not axes and x.size == 0:
        raise ShapeError("reduction over empty tensor")


def _expand(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a.data, axes)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._make(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axes, keepdims),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a.data, axes)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor._make(np.asarray(out), (a,),
                        lambda g: (_expand(g / count, a.shape, axes, keepdims),), "mean")


def reduce_max(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max; the gradient goes to the first maximal element (lowest linear index)."""
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a.data, axes)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape([1 if ax in axes else s for ax, s in enumerate(a.shape)])

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.reshape(g, idx.shape)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return Tensor._make(np.asarray(out), (a,), vjp, "max")


def reduction(kind: str, x: Tensor, axis=None, keepdims=False) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if kind not in fns:
        raise ValueError(f"unknown reduction {kind!r}")
    return fns[kind](x, axis, keepdims)


def norm(a: Tensor, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero gradient instead of NaN."""
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a.data, axes)
    out = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))
    safe = np.where(out > 0, out, 1)

    def vjp(g):
        g = g if keepdims else np.expand_dims(g, axes)
        return (np.where(out > 0, g * a.data / safe, 0),)

    return Tensor._make(out if keepdims else np.squeeze(out, axis=axes), (a,), vjp, "norm")


def kth_largest(a: Tensor, k: int, axis: int = -1) -> Tensor:
    """k-th largest value along ``axis`` (keepdims). Gradient routes to the selected entry;
    among equal values the lowest index ranks first."""
    n = a.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    order = np.argsort(-a.data, axis=axis, kind="stable")
    idx = np.take(order, [k - 1], axis=axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)

    return Tensor._make(out, (a,), vjp, "kth_largest")


# -- shape ops ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._make(np.array(out), (a,), vjp, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tensors, vjp, "concat")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors,
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


# -- composite helpers ----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), vjp, "softmax")


# -- serialization --------------------------------------------------------------

def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"cannot serialize dtype {arr.dtype}")
    header = MAGIC + struct.pack("<IBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the offset just past it."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("bad tensor magic")
    version, code, rank = struct.unpack_from("<IBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    pos = offset + 10
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if pos + nbytes > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=pos)
    arr = arr.astype(dtype).reshape(shape)
    return Tensor(arr, dtype=dtype), pos + nbytes


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t, _ = tensor_from_bytes(fh.read())
    return t
