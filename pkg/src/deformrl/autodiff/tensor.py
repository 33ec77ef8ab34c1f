"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a numpy array and records the operation that produced
it, forming a DAG. ``backward`` on a scalar tensor walks the DAG once in
reverse topological order; gradients accumulate into the ``.grad`` of
every reachable leaf (inputs and ``Parameter``s). Repeated backward calls
without ``zero_grad`` keep accumulating leaf gradients.

Graph construction and backward are single-threaded per graph; arrays are
treated as immutable once produced by a forward op. Broadcasting is
supported only in the restricted trailing-axes form the network code
needs (bias addition, scalar scaling); gradients of broadcast operands
are reduced back to the operand shape.

Every forward op checks its result and raises ``FloatingPointError`` on
the first NaN/Inf instead of letting it propagate silently.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "add",
    "mul",
    "power",
    "texp",
    "relu",
    "matmul",
    "linear",
    "tsum",
    "tmean",
    "softmax",
    "reshape",
    "swapaxes",
    "concat",
    "getitem",
    "conv2d",
]

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 default, float32 allowed)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


def _check_finite(data: np.ndarray) -> np.ndarray:
    # One reduction pass instead of isfinite().all(): a NaN/Inf anywhere
    # poisons the sum, which is all we need to detect.
    if not math.isfinite(float(data.sum())):
        raise FloatingPointError("non-finite value produced by a forward op")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# A backward closure receives the output gradient and a deposit(parent, g)
# callback that routes g either into the per-call flow dict (interior
# nodes) or into parent.grad (leaves).
BackwardFn = Callable[[np.ndarray, Callable[["Tensor", np.ndarray], None]], None]


class Tensor:
    """A node in the computation DAG: value, lazily materialized gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.size:
            _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- graph plumbing ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: BackwardFn, checked: bool = False) -> "Tensor":
        # `checked` marks ops that only rearrange or bound already-checked
        # values (reshape, relu, softmax, ...), where re-checking is redundant.
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data) if checked else _check_finite(np.asarray(data))
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        if _GradMode.enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------

    def backward(self) -> int:
        """Backpropagate from a scalar; returns the number of nodes visited.

        Each node in the DAG is visited exactly once, after all of its
        consumers. Leaf gradients accumulate across repeated calls until
        ``zero_grad``.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        # Iterative post-order DFS over requires_grad parents; reversed
        # post-order is a topological order consumers-first.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def deposit(parent: "Tensor", grad: np.ndarray) -> None:
            if parent._backward is None:
                parent._accumulate(grad)
            else:
                key = id(parent)
                if key in flow:
                    flow[key] = flow[key] + grad
                else:
                    flow[key] = grad

        visits = 0
        for node in reversed(topo):
            visits += 1
            if node._backward is None:
                if node is self:  # backward called directly on a leaf
                    node._accumulate(flow.pop(id(node)))
                continue
            node._backward(flow.pop(id(node)), deposit)
        return visits

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def exp(self):
        return texp(self)

    def item(self) -> float:
        return float(self.data)


class Parameter(Tensor):
    """A named, trainable tensor that persists across optimization steps."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitive ops -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, _unbroadcast(grad, a.data.shape))
        if b.requires_grad:
            deposit(b, _unbroadcast(grad, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, _unbroadcast(grad * b.data, a.data.shape))
        if b.requires_grad:
            deposit(b, _unbroadcast(grad * a.data, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def power(a, exponent) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    out_data = a.data ** p

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, grad * p * a.data ** (p - 1.0))

    return Tensor._make(out_data, (a,), backward)


def texp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # the finiteness guard raises instead
        out_data = np.exp(a.data)

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, grad * out_data)

    return Tensor._make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, grad * (a.data > 0.0))

    # relu of finite data is finite; skip the redundant guard
    return Tensor._make(out_data, (a,), backward, checked=True)


def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch axes on either operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(grad, deposit):
        if a.requires_grad:
            ga = grad @ np.swapaxes(b.data, -1, -2)
            deposit(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ grad
            deposit(b, _unbroadcast(gb, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Fused affine map ``x @ weight + bias`` over the trailing axis."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ValueError(
            f"linear: input width {x.data.shape[-1]} != weight rows {weight.data.shape[0]}")
    bias_t = None if bias is None else _as_tensor(bias)
    lead = x.data.shape[:-1]
    flat = x.data.reshape(-1, x.data.shape[-1])
    out_flat = flat @ weight.data
    if bias_t is not None:
        out_flat = out_flat + bias_t.data
    out_data = out_flat.reshape(*lead, weight.data.shape[1])
    parents = (x, weight) if bias_t is None else (x, weight, bias_t)

    def backward(grad, deposit):
        gflat = grad.reshape(-1, grad.shape[-1])
        if x.requires_grad:
            deposit(x, (gflat @ weight.data.T).reshape(x.data.shape))
        if weight.requires_grad:
            deposit(weight, flat.T @ gflat)
        if bias_t is not None and bias_t.requires_grad:
            deposit(bias_t, gflat.sum(axis=0))

    return Tensor._make(out_data, parents, backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(grad, deposit):
        if not a.requires_grad:
            return
        g = np.asarray(grad)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        deposit(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor._make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`; slices sum to 1."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad, deposit):
        if a.requires_grad:
            inner = (grad * out_data).sum(axis=axis, keepdims=True)
            deposit(a, out_data * (grad - inner))

    return Tensor._make(out_data, (a,), backward, checked=True)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, grad.reshape(a.data.shape))

    return Tensor._make(out_data, (a,), backward, checked=True)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(grad, deposit):
        if a.requires_grad:
            deposit(a, np.swapaxes(grad, ax1, ax2))

    return Tensor._make(out_data, (a,), backward, checked=True)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def backward(grad, deposit):
        pieces = np.split(grad, splits, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                deposit(t, piece)

    return Tensor._make(out_data, tuple(ts), backward, checked=True)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    picked = a.data[idx]
    out_data = np.array(picked) if np.ndim(picked) == 0 else picked.copy()

    def backward(grad, deposit):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, grad)
            deposit(a, full)

    return Tensor._make(out_data, (a,), backward, checked=True)


# -- convolution --------------------------------------------------------

def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        pad_h = max((oh - 1) * stride + k - h, 0)
        pad_w = max((ow - 1) * stride + k - w, 0)
        pads = ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))
    elif padding == "valid":
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        pads = ((0, 0), (0, 0))
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return oh, ow, pads


def conv2d(x, kernels, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation) of CHW input with OIHW kernels.

    Accepts a single image ``(c_in, h, w)`` or a batch ``(n, c_in, h, w)``.
    Kernels must be square with odd size and no larger than the image.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects (n,c,h,w) input and (o,i,k,k) kernels")
    n, c_in, h, w = xd.shape
    c_out, c_in_k, kh, kw = kernels.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("conv2d kernels must be square with odd size")
    if c_in_k != c_in:
        raise ValueError(f"kernel input channels {c_in_k} != image channels {c_in}")
    if kh > h or kw > w:
        raise ValueError("kernel larger than input image")
    oh, ow, pads = _conv_geometry(h, w, kh, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0)) + pads)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # (n, c_in, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c_in * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    out_data = (cols @ wmat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if squeeze:
        out_data = out_data[0]

    def backward(grad, deposit):
        g = grad[None] if squeeze else grad
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        if kernels.requires_grad:
            deposit(kernels, (gflat.T @ cols).reshape(kernels.data.shape))
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, oh, ow, c_in, kh, kw)
            gx = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gx[:, :, di:di + oh * stride:stride, dj:dj + ow * stride:stride] += \
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            (ph0, _), (pw0, _) = pads
            gx = gx[:, :, ph0:ph0 + h, pw0:pw0 + w]
            deposit(x, gx[0] if squeeze else gx)

    return Tensor._make(out_data, (x, kernels), backward)
