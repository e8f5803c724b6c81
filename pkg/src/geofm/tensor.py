"""Dense float tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed (float32 storage by default, float64 supported for
verification runs); reductions accumulate in 64-bit regardless of storage
dtype. Every operation records its inputs and a backward closure on the
output tensor, so the computation graph doubles as the autodiff tape:
``Tensor.backward`` topologically sorts the recorded nodes and visits each
exactly once in reverse order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import NumericError, ShapeError, UsageError

_GRAD_ENABLED = True
_FINITE_CHECKS = False

_FLOAT_TYPES = (np.float32, np.float64)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    """Globally verify that every op output is finite (slow; for tests)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


class Tensor:
    """A dense float array plus optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_TYPES else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None
        self.name = name

    # ---------------------------------------------------------------- basics
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # ------------------------------------------------------------- backward
    def backward(self, leaves: Iterable["Tensor"] | None = None) -> None:
        """Reverse-mode sweep from this scalar.

        Visits every recorded node exactly once in reverse topological
        order, accumulating (summing) gradients at fan-in. Leaves passed in
        `leaves` that the graph never reaches receive an explicit zero grad.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn()
        if leaves is not None:
            for leaf in leaves:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, dtype=self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, dtype=self.dtype), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _scalar_err(t: Tensor):
    raise UsageError(f"item() requires a one-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


# --------------------------------------------------------------- graph glue
def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        # always own the buffer: g may alias another node's grad
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Promote python scalars to the partner tensor's dtype (no upcasting)."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


# ----------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = _make(a.data + b.data, (a, b), None, "add")

    def backward():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = _make(a.data - b.data, (a, b), None, "sub")

    def backward():
        _accum(a, out.grad)
        _accum(b, -out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = _make(a.data * b.data, (a, b), None, "mul")

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * b.data)
        if b.requires_grad:
            _accum(b, out.grad * a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = _make(a.data / b.data, (a, b), None, "div")

    def backward():
        if a.requires_grad:
            _accum(a, out.grad / b.data)
        if b.requires_grad:
            _accum(b, -out.grad * a.data / (b.data * b.data))

    out._backward_fn = backward if out.requires_grad else None
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = _make(a.data**exponent, (a,), None, "pow")

    def backward():
        _accum(a, out.grad * exponent * a.data ** (exponent - 1.0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None, "exp")

    def backward():
        _accum(a, out.grad * out.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.log(a.data), (a,), None, "log")

    def backward():
        _accum(a, out.grad / a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None, "sqrt")

    def backward():
        _accum(a, out.grad * 0.5 / out.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.maximum(a.data, 0), (a,), None, "relu")

    def backward():
        _accum(a, out.grad * (a.data > 0))

    out._backward_fn = backward if out.requires_grad else None
    return out


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = _make((a.data * cdf).astype(a.data.dtype), (a,), None, "gelu")

    def backward():
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _accum(a, out.grad * (cdf + a.data * pdf))

    out._backward_fn = backward if out.requires_grad else None
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(out_data.astype(x.dtype), (a,), None, "sigmoid")

    def backward():
        _accum(a, out.grad * out.data * (1.0 - out.data))

    out._backward_fn = backward if out.requires_grad else None
    return out


# ------------------------------------------------------------- shape/movement
def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = _make(a.data.reshape(shape), (a,), None, "reshape")

    def backward():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), None, "transpose")

    def backward():
        _accum(a, out.grad.transpose(inv))

    out._backward_fn = backward if out.requires_grad else None
    return out


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[idx]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)
    out = _make(np.ascontiguousarray(out_data), (a,), None, "getitem")

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along `axis`; duplicate indices accumulate in the backward pass."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = _make(np.take(a.data, indices, axis=axis), (a,), None, "take")

    def backward():
        g = np.zeros_like(a.data)
        gm = np.moveaxis(g, axis, 0)
        np.add.at(gm, indices.reshape(-1), np.moveaxis(out.grad, axis, 0).reshape((-1,) + gm.shape[1:]))
        _accum(a, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None, "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, out.grad[tuple(sl)])

    out._backward_fn = backward if out.requires_grad else None
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), None, "stack")

    def backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(out.grad, i, axis=axis))

    out._backward_fn = backward if out.requires_grad else None
    return out


# ------------------------------------------------------------------ reductions
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    out = _make(np.asarray(data), (a,), None, "sum")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------------- matmul
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), None, "matmul")

    def backward():
        g = out.grad
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if a.ndim > 1 else np.outer(g, b.data).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, ga)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g) if b.ndim > 1 else np.multiply.outer(a.data, g)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, gb)

    out._backward_fn = backward if out.requires_grad else None
    return out


# ------------------------------------------------------------------ softmax
def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis: shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(a.data.dtype)
    out = _make(y.astype(a.data.dtype), (a,), None, "softmax")

    def backward():
        g = out.grad
        dot = np.sum(g * out.data, axis=axis, keepdims=True)
        _accum(a, (g - dot) * out.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------- layer norm
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=np.float64)
    var = np.var(x.data, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = ((x.data - mu) * inv).astype(x.data.dtype)
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None, "layer_norm")

    def backward():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0, dtype=np.float64))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, x.data.shape[-1]).sum(axis=0, dtype=np.float64))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = np.mean(gx, axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
            _accum(x, (gx - m1 - xhat * m2) * inv)

    out._backward_fn = backward if out.requires_grad else None
    return out


# ------------------------------------------------------------- convolutions
def _check_divisible(value: int, by: int, what: str):
    if by <= 0 or value % by != 0:
        from .errors import ConfigError

        raise ConfigError(f"{what}: {value} is not divisible by {by}")


def conv3d(x, kernel, stride: tuple[int, int, int], bias=None) -> Tensor:
    """3-D cross-correlation over a (C, T, H, W) volume.

    kernel is (D, C, kt, kh, kw). In patch mode (stride == kernel extent,
    the tokenizer case) windows do not overlap and the input gradient is a
    pure reshape; a general strided path covers everything else.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects x (C,T,H,W) and kernel (D,C,kt,kh,kw); got {x.shape} and {kernel.shape}")
    C, T, H, W = x.shape
    D, Ck, kt, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv3d channel mismatch: input has {C} channels, kernel expects {Ck}")
    st, sh, sw = stride
    patch_mode = (st, sh, sw) == (kt, kh, kw)
    if patch_mode:
        _check_divisible(T, kt, "temporal extent")
        _check_divisible(H, kh, "height")
        _check_divisible(W, kw, "width")
    To = (T - kt) // st + 1
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    sw_view = sliding_window_view(x.data, (kt, kh, kw), axis=(1, 2, 3))[:, ::st, ::sh, ::sw]
    # 64-bit accumulation: both operands are promoted so each output element
    # rounds once, keeping kernel-surgery equivalences below 1e-6.
    col = np.ascontiguousarray(sw_view.transpose(1, 2, 3, 0, 4, 5, 6), dtype=np.float64).reshape(
        To * Ho * Wo, C * kt * kh * kw
    )
    kflat = kernel.data.reshape(D, -1).astype(np.float64)
    out_data = (col @ kflat.T).astype(x.data.dtype).reshape(To, Ho, Wo, D).transpose(3, 0, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[:, None, None, None]
        parents.append(bias)
    out = _make(np.ascontiguousarray(out_data), tuple(parents), None, "conv3d")

    def backward():
        g = out.grad  # (D, To, Ho, Wo)
        gflat = g.reshape(D, -1)
        if kernel.requires_grad:
            _accum(kernel, (gflat @ col).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2, 3), dtype=np.float64))
        if x.requires_grad:
            dcol = gflat.T @ kflat  # (ToHoWo, C*kt*kh*kw)
            if patch_mode:
                dx = dcol.reshape(To, Ho, Wo, C, kt, kh, kw).transpose(3, 0, 4, 1, 5, 2, 6).reshape(x.shape)
            else:
                dx = np.zeros_like(x.data)
                dcol6 = dcol.reshape(To, Ho, Wo, C, kt, kh, kw)
                for it in range(kt):
                    for ih in range(kh):
                        for iw in range(kw):
                            dx[:, it : it + st * To : st, ih : ih + sh * Ho : sh, iw : iw + sw * Wo : sw] += (
                                dcol6[:, :, :, :, it, ih, iw].transpose(3, 0, 1, 2)
                            )
            _accum(x, dx)

    out._backward_fn = backward if out.requires_grad else None
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over a batch (N, C, H, W); kernel (D, C, kh, kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x (N,C,H,W) and kernel (D,C,kh,kw); got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    D, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels, kernel expects {Ck}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    sw_view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    col = np.ascontiguousarray(sw_view.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    kflat = kernel.data.reshape(D, -1)
    out_data = (col @ kflat.T).reshape(N, Ho, Wo, D).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[None, :, None, None]
        parents.append(bias)
    out = _make(np.ascontiguousarray(out_data), tuple(parents), None, "conv2d")

    def backward():
        g = out.grad  # (N, D, Ho, Wo)
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, D)
        if kernel.requires_grad:
            _accum(kernel, (gflat.T @ col).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, D)
            for ih in range(kh):
                for iw in range(kw):
                    contrib = (gt @ kernel.data[:, :, ih, iw]).reshape(N, Ho, Wo, C).transpose(0, 3, 1, 2)
                    dxp[:, :, ih : ih + stride * Ho : stride, iw : iw + stride * Wo : stride] += contrib
            if padding:
                dxp = dxp[:, :, padding : padding + H, padding : padding + W]
            _accum(x, dxp)

    out._backward_fn = backward if out.requires_grad else None
    return out


def conv_transpose2d(x, kernel, bias=None, stride: int = 2) -> Tensor:
    """2x-style transposed convolution with kernel extent == stride.

    x is (N, C, H, W), kernel (C, D, k, k) with k == stride, output
    (N, D, H*k, W*k). Non-overlapping blocks keep both passes as matmuls.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    N, C, H, W = x.shape
    Ck, D, khh, kww = kernel.shape
    if khh != stride or kww != stride:
        raise ShapeError(f"conv_transpose2d requires kernel extent == stride; got kernel {kernel.shape}, stride {stride}")
    if Ck != C:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {C} channels, kernel expects {Ck}")
    xt = x.data.transpose(0, 2, 3, 1).reshape(-1, C)  # (NHW, C)
    kflat = kernel.data.reshape(C, -1)  # (C, D*k*k)
    blocks = (xt @ kflat).reshape(N, H, W, D, stride, stride)
    out_data = np.ascontiguousarray(blocks.transpose(0, 3, 1, 4, 2, 5)).reshape(N, D, H * stride, W * stride)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[None, :, None, None]
        parents.append(bias)
    out = _make(out_data, tuple(parents), None, "conv_transpose2d")

    def backward():
        g = out.grad
        gb = g.reshape(N, D, H, stride, W, stride).transpose(0, 2, 4, 1, 3, 5).reshape(-1, D * stride * stride)
        if kernel.requires_grad:
            _accum(kernel, (xt.T @ gb).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            dx = (gb @ kflat.T).reshape(N, H, W, C).transpose(0, 3, 1, 2)
            _accum(x, np.ascontiguousarray(dx))

    out._backward_fn = backward if out.requires_grad else None
    return out


# -------------------------------------------------------------------- pooling
def max_pool2d(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    N, C, H, W = x.shape
    _check_divisible(H, factor, "height")
    _check_divisible(W, factor, "width")
    blocks = x.data.reshape(N, C, H // factor, factor, W // factor, factor).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(blocks).reshape(N, C, H // factor, W // factor, factor * factor)
    arg = np.argmax(flat, axis=-1)
    out = _make(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], (x,), None, "max_pool2d")

    def backward():
        gblocks = np.zeros_like(flat)
        np.put_along_axis(gblocks, arg[..., None], out.grad[..., None], axis=-1)
        g = gblocks.reshape(N, C, H // factor, W // factor, factor, factor).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        _accum(x, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def avg_pool2d(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    N, C, H, W = x.shape
    _check_divisible(H, factor, "height")
    _check_divisible(W, factor, "width")
    blocks = x.data.reshape(N, C, H // factor, factor, W // factor, factor)
    data = blocks.mean(axis=(3, 5), dtype=np.float64).astype(x.data.dtype)
    out = _make(data, (x,), None, "avg_pool2d")

    def backward():
        g = out.grad / (factor * factor)
        g = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        _accum(x, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    N, C, H, W = x.shape
    out = _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), None, "upsample_nearest2x")

    def backward():
        g = out.grad.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5), dtype=np.float64).astype(x.data.dtype)
        _accum(x, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------- losses
def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = _make(np.asarray(np.mean(diff * diff, dtype=np.float64).astype(pred.data.dtype)), (pred, target), None, "mse")
    scale = 2.0 / pred.data.size

    def backward():
        g = out.grad * scale * diff
        _accum(pred, g)
        _accum(target, -g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross entropy of (N, K) logits against integer labels (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N,K) logits and (N,) labels; got {logits.shape} and {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=1, keepdims=True))
    loss = -np.mean(logp[np.arange(n), labels], dtype=np.float64)
    out = _make(np.asarray(loss.astype(logits.data.dtype)), (logits,), None, "cross_entropy")

    def backward():
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        _accum(logits, out.grad * g / n)

    out._backward_fn = backward if out.requires_grad else None
    return out


def bce_with_logits(logits, targets, reduction: str = "mean") -> Tensor:
    """Stable elementwise binary cross entropy on raw logits."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    if reduction == "mean":
        data = np.mean(loss, dtype=np.float64).astype(x.dtype)
        scale = 1.0 / x.size
    elif reduction == "sum":
        data = np.sum(loss, dtype=np.float64).astype(x.dtype)
        scale = 1.0
    else:
        raise UsageError(f"unknown reduction {reduction!r}")
    out = _make(np.asarray(data), (logits,), None, "bce_with_logits")

    def backward():
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _accum(logits, out.grad * scale * (sig - t))

    out._backward_fn = backward if out.requires_grad else None
    return out


def smooth_l1(pred, target, beta: float = 1.0, reduction: str = "sum") -> Tensor:
    """Huber-style loss: quadratic inside |x| < beta, linear outside."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.data.dtype)
    d = pred.data - t
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    if reduction == "sum":
        data, scale = np.sum(loss, dtype=np.float64), 1.0
    elif reduction == "mean":
        data, scale = np.mean(loss, dtype=np.float64), 1.0 / pred.data.size
    else:
        raise UsageError(f"unknown reduction {reduction!r}")
    out = _make(np.asarray(data.astype(pred.data.dtype)), (pred,), None, "smooth_l1")

    def backward():
        g = np.where(ad < beta, d / beta, np.sign(d))
        _accum(pred, out.grad * scale * g)

    out._backward_fn = backward if out.requires_grad else None
    return out
