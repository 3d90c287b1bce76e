"""Dense tensors with tape-ordered reverse-mode differentiation.

Every primitive op appends a node to the computation graph with a global
sequence number.  ``Tensor.backward`` collects the nodes reachable from the
root into a :class:`ComputationRecord` and replays them in exactly the
reverse order in which they executed.  A record can be replayed once; the
saved buffers are released afterwards.

Arrays are numpy arrays in the process-wide default dtype (float64 unless
changed with :func:`set_default_dtype`).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ComputationRecord",
    "DimensionError",
    "NonFiniteError",
    "BackwardError",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "relu",
    "clamp_min",
    "sum",
    "mean",
    "reshape",
    "matmul",
    "concat",
    "conv2d",
    "conv2d_numpy",
    "upsample_nearest",
    "reduce_stats",
    "softmax",
    "log_softmax",
    "cross_entropy_seg",
    "grad_check",
]

_DEFAULT_DTYPE = np.float64
_seq = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward value is NaN or infinite."""


class BackwardError(RuntimeError):
    """Raised on an invalid backward pass (e.g. replaying a consumed graph)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


def _check_finite(op: str, arr: np.ndarray, what: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in {what} of '{op}'")


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ------------------------------------------------------
    def backward(self, grad=None) -> "ComputationRecord":
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Returns the record that was replayed.
        """
        record = ComputationRecord.from_root(self)
        record.backward(grad)
        return record

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class ComputationRecord:
    """Ordered list of executed ops reachable from a root tensor."""

    def __init__(self, root: Tensor, nodes: list):
        self.root = root
        self.nodes = nodes  # execution order

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationRecord":
        if root._node is None:
            if not root.requires_grad:
                raise BackwardError("tensor does not require grad and has no graph")
            return cls(root, [])
        if root._node.consumed:
            raise BackwardError(
                "backward already ran on this graph; run a new forward pass first"
            )
        seen: set[int] = set()
        nodes = []
        stack = [root._node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.consumed:
                raise BackwardError("graph contains nodes from a consumed backward pass")
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(root, nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, grad=None) -> None:
        root = self.root
        if grad is None:
            if root.size != 1:
                raise BackwardError("grad must be given for non-scalar outputs")
            grad = np.ones_like(root.data)
        grad = np.asarray(grad, dtype=root.data.dtype)
        if grad.shape != root.shape:
            raise DimensionError(f"grad shape {grad.shape} != output shape {root.shape}")
        if root._node is None:
            _accumulate(root, grad)
            return
        if root._node.consumed:
            raise BackwardError(
                "backward already ran on this graph; run a new forward pass first"
            )
        # grads keyed by id(tensor); the node list keeps every tensor alive
        grads: dict[int, np.ndarray] = {}
        node_out = {id(root._node): root}
        grads[id(root)] = grad
        for node in self.nodes:
            for t in node.inputs:
                if t._node is not None:
                    node_out[id(t._node)] = t
        for node in reversed(self.nodes):
            out = node_out[id(node)]
            g = grads.pop(id(out), None)
            node.consumed = True
            backward_fn, node.backward_fn = node.backward_fn, None
            if g is None:
                node.inputs = ()
                continue
            in_grads = backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                _check_finite(node.op, gi, "backward")
                if t._node is None:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
            node.inputs = ()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return _make("power", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make("log", out, (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,),
                 lambda g: (g * mask,))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo) element-wise; gradient passes where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    out = np.where(mask, a.data, lo).astype(a.dtype)
    return _make("clamp_min", out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise DimensionError(f"repeated axis in {axis}")
    return axes


def _rowsum(x: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    # Reduced axes are moved last and flattened so each output element is a
    # contiguous row sum: the result does not depend on the other extents.
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    flat = np.ascontiguousarray(moved).reshape([x.shape[i] for i in keep] + [-1])
    out = flat.sum(axis=-1)
    if keepdims:
        out = out.reshape([1 if i in axes else x.shape[i] for i in range(x.ndim)])
    return out


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kshape = [1 if i in axes else n for i, n in enumerate(shape)]
    out = _rowsum(a.data, axes, keepdims)
    return _make("sum", np.asarray(out), (a,),
                 lambda g: (np.broadcast_to(np.reshape(g, kshape), shape).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise DimensionError("mean over an empty extent")
    shape = a.shape
    kshape = [1 if i in axes else s for i, s in enumerate(shape)]
    out = _rowsum(a.data, axes, keepdims) / n
    return _make("mean", np.asarray(out), (a,),
                 lambda g: (np.broadcast_to(np.reshape(g, kshape) / n, shape).copy(),))


def _var(a: Tensor, axes: tuple, keepdims: bool) -> Tensor:
    n = int(np.prod([a.shape[i] for i in axes]))
    mu = _rowsum(a.data, axes, True) / n
    centered = a.data - mu
    out = _rowsum(centered * centered, axes, keepdims) / n
    kshape = mu.shape

    def backward(g):
        return (np.reshape(g, kshape) * (2.0 / n) * centered,)

    return _make("var", out, (a,), backward)


def reduce_stats(x, axes, keepdims: bool = True) -> tuple[Tensor, Tensor]:
    """Mean and biased (population) variance over ``axes``."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        raise DimensionError("reduce_stats needs at least one axis")
    for ax in axes:
        if x.shape[ax] == 0:
            raise DimensionError(f"reduce_stats over zero-extent axis {ax}")
    return mean(x, axes, keepdims), _var(x, axes, keepdims)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, index) -> Tensor:
    """Basic indexing (slices / integers); the gradient is scattered back."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _make("take", np.array(a.data[index]), (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# convolution / resampling


def _check_conv(x: np.ndarray, w: np.ndarray, bias, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: weight must be OutC x InC x kH x kW, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d: input channels (axis 1 of input) = {x.shape[1]} but "
            f"weight in-channels (axis 1 of weight) = {w.shape[1]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} does not match weight out-channels {w.shape[0]}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < w.shape[2] or wp < w.shape[3]:
        raise DimensionError(
            f"conv2d: kernel {w.shape[2:]} larger than padded input (H, W) = ({hp}, {wp})")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*kh*kw, Ho*Wo)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)


def conv2d_numpy(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Plain cross-correlation on arrays (no graph)."""
    _check_conv(x, weight, bias, stride, padding)
    return _conv_forward(x, weight, bias, stride, padding)[0]


def _conv_forward(x, w, bias, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    wm = w.reshape(o, -1)
    out = np.empty((n, o, ho, wo), dtype=np.result_type(x, w))
    cols = []
    for i in range(n):
        xp = np.pad(x[i], ((0, 0), (padding, padding), (padding, padding))) if padding else x[i]
        col = _im2col(xp, kh, kw, stride)
        cols.append(col)
        res = wm @ col
        if bias is not None:
            res += bias[:, None]
        out[i] = res.reshape(o, ho, wo)
    return out, cols


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Each sample is convolved separately so a sample's output does not depend
    on what else is in the batch.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_conv(x.data, weight.data, None if bias is None else bias.data, stride, padding)
    out, cols = _conv_forward(x.data, weight.data, None if bias is None else bias.data,
                              stride, padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = out.shape[2:]
    wm = weight.data.reshape(o, -1)
    need_x = x.requires_grad

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gw = np.zeros_like(wm)
        for i in range(n):
            gw += g3[i] @ cols[i].T
        gm = g3.transpose(1, 0, 2).reshape(o, n * ho * wo)
        gx = None
        if need_x:
            gx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            dcol = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a:a + stride * (ho - 1) + 1:stride,
                       b:b + stride * (wo - 1) + 1:stride] += dcol[:, :, a, b]
        if need_x and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out, inputs, backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest: expected NCHW, got {x.shape}")
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape
    return _make("upsample_nearest", out, (x,),
                 lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# probabilities and losses


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = _softmax_np(x.data, axis)
    return _make("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _make("log_softmax", out, (x,),
                 lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def cross_entropy_seg(logits, labels, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is N x Cl x H x W, ``labels`` an integer array N x H x W.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(
            f"cross_entropy_seg: logits {logits.shape} vs labels {labels.shape}")
    n_cls = logits.shape[1]
    valid = labels != ignore_index
    if not valid.any():
        raise ValueError("cross_entropy_seg: every pixel is ignored")
    if ((labels[valid] < 0) | (labels[valid] >= n_cls)).any():
        raise ValueError("cross_entropy_seg: label outside [0, n_classes)")
    safe = np.where(valid, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * valid[:, None] * (float(g) / count)
        return (grad,)

    return _make("cross_entropy_seg", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` takes no arguments and returns a scalar tensor computed from
    ``params``; it is called once for the analytic pass and twice per
    parameter element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    out = f()
    if out.size != 1:
        raise DimensionError("grad_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f().item()
            flat[i] = orig - eps
            with no_grad():
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("grad_check: f is not finite near the probe point")
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
