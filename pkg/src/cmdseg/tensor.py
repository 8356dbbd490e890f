"""Dense float64 tensors with reverse-mode automatic differentiation.

Activations use N x C x H x W layout, kernels Cout x Cin x Kh x Kw.
Every operation validates that its output is finite: NaN/Inf raises
instead of propagating silently.
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"CMDT"
FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A tensor value, gradient or loss became NaN/Inf."""


def _check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values encountered in {what}")


class Tensor:
    """A dense array plus an optional record of how it was computed.

    The graph of parent links is the differentiation tape: calling
    ``backward()`` on a scalar replays it once in reverse topological
    order. Gradients accumulate additively, so a second ``backward()``
    without ``zero_grad()`` doubles them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn, op: str) -> "Tensor":
        _check_finite(data, f"output of '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
            out._op = op
        else:
            out._parents = ()
            out._backward_fn = None
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ---------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        b = self._coerce(other)
        data = self.data + b.data
        return Tensor._from_op(
            data, (self, b),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, b.shape)),
            "add")

    __radd__ = __add__

    def __sub__(self, other):
        b = self._coerce(other)
        data = self.data - b.data
        return Tensor._from_op(
            data, (self, b),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, b.shape)),
            "sub")

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            k = float(other)
            return Tensor._from_op(self.data * k, (self,), lambda g: (g * k,), "scale")
        b = self._coerce(other)
        data = self.data * b.data
        return Tensor._from_op(
            data, (self, b),
            lambda g: (_unbroadcast(g * b.data, self.shape), _unbroadcast(g * self.data, b.shape)),
            "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        b = self._coerce(other)
        if np.any(b.data == 0.0):
            raise ZeroDivisionError("division by zero in tensor divide")
        data = self.data / b.data
        return Tensor._from_op(
            data, (self, b),
            lambda g: (_unbroadcast(g / b.data, self.shape),
                       _unbroadcast(-g * self.data / (b.data * b.data), b.shape)),
            "div")

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def exp(self):
        data = np.exp(self.data)
        return Tensor._from_op(data, (self,), lambda g: (g * data,), "exp")

    def log(self):
        if np.any(self.data <= 0.0):
            raise ValueError("log requires strictly positive inputs")
        return Tensor._from_op(np.log(self.data), (self,), lambda g: (g / self.data,), "log")

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise ValueError("sqrt requires non-negative inputs")
        data = np.sqrt(self.data)
        return Tensor._from_op(data, (self,), lambda g: (g * 0.5 / data,), "sqrt")

    def relu(self):
        # subgradient at 0 is 0
        mask = self.data > 0.0
        return Tensor._from_op(np.where(mask, self.data, 0.0), (self,),
                               lambda g: (g * mask,), "relu")

    # -- reductions / shape -------------------------------------------

    def sum(self, axes=None, keepdims: bool = False):
        axes_t = _norm_axes(axes, self.data.ndim)
        data = self.data.sum(axis=axes_t, keepdims=keepdims)
        shape = self.shape

        def bwd(g):
            gg = g
            if not keepdims and axes_t is not None:
                gg = np.expand_dims(gg, axes_t)
            return (np.broadcast_to(gg, shape).copy(),)

        return Tensor._from_op(np.asarray(data), (self,), bwd, "sum")

    def mean(self, axes=None, keepdims: bool = False):
        axes_t = _norm_axes(axes, self.data.ndim)
        if axes_t is None:
            count = self.data.size
        else:
            count = int(np.prod([self.shape[a] for a in axes_t]))
        return self.sum(axes=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, shape):
        shape = tuple(shape)
        orig = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,),
                               lambda g: (g.reshape(orig),), "reshape")

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode differentiation from a scalar loss.

        Gradients are accumulated into ``.grad`` of every reachable
        tensor with ``requires_grad``.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        if not self.requires_grad:
            raise ValueError("loss does not require grad; nothing on the tape")

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"gradient of '{node._op}'")
            if node._parents == () or node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if id(p) in grads:
                    grads[id(p)] += pg
                else:
                    grads[id(p)] = pg


def _norm_axes(axes, ndim: int):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if len(axes) == 0:
        raise ValueError("empty reduction axis set")
    if len(set(axes)) != len(axes):
        raise ValueError("duplicate reduction axes")
    return axes


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- factory helpers --------------------------------------------------

def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"all tensor extents must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)), requires_grad)


def rand_uniform(shape, lo: float, hi: float, seed=None, rng=None,
                 requires_grad: bool = False) -> Tensor:
    gen = rng if rng is not None else np.random.default_rng(seed)
    return Tensor(gen.uniform(lo, hi, size=_check_shape(shape)), requires_grad)


def rand_normal(shape, mu: float, sigma: float, seed=None, rng=None,
                requires_grad: bool = False) -> Tensor:
    gen = rng if rng is not None else np.random.default_rng(seed)
    return Tensor(mu + sigma * gen.standard_normal(size=_check_shape(shape)), requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tuple(tensors), bwd, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._from_op(data, tuple(tensors), bwd, "stack")


def standardize(x: Tensor, axes, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Fused (x - mean) / sqrt(var + eps) over the given axes (biased variance).

    Returns the standardized tensor plus the per-group mean/variance as
    plain arrays (keepdims layout), e.g. for running-statistics updates.
    """
    axes_t = _norm_axes(axes, x.data.ndim)
    mean = x.data.mean(axis=axes_t, keepdims=True)
    var = x.data.var(axis=axes_t, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def bwd(g):
        gm = g.mean(axis=axes_t, keepdims=True)
        gx = (g * xhat).mean(axis=axes_t, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._from_op(xhat, (x,), bwd, "standardize"), mean, var


def reduce_stats(x: Tensor, axes) -> tuple[Tensor, Tensor]:
    """Mean and biased (population) variance over the given axes.

    Both outputs keep reduced dimensions so they broadcast against x.
    """
    _norm_axes(axes, x.data.ndim)  # validates non-emptiness
    m = x.mean(axes=axes, keepdims=True)
    d = x - m
    var = (d * d).mean(axes=axes, keepdims=True)
    return m, var


# -- convolution ------------------------------------------------------

def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, dilation: int,
                   padding: str) -> tuple[int, int, int, int, int, int]:
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    if padding == "valid":
        if h < eh or w < ew:
            raise ValueError("kernel larger than input under valid padding")
        return (h - eh) // stride + 1, (w - ew) // stride + 1, 0, 0, 0, 0
    if padding == "same":
        hout = -(-h // stride)
        wout = -(-w // stride)
        ph = max((hout - 1) * stride + eh - h, 0)
        pw = max((wout - 1) * stride + ew - w, 0)
        return hout, wout, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1, padding: str = "same") -> Tensor:
    """2D cross-correlation (no kernel flip) over NCHW input.

    Implemented as gather-to-columns plus one matmul per batch; backward
    scatters column gradients back with per-tap slice adds.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW kernel")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {cin_k}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    hout, wout, pt, pb, pl, pr = _conv_geometry(h, w, kh, kw, stride, dilation, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    taps = [(ki, kj) for ki in range(kh) for kj in range(kw)]
    cols = np.empty((n, cin, kh * kw, hout, wout), dtype=np.float64)
    for t, (ki, kj) in enumerate(taps):
        r0 = ki * dilation
        c0 = kj * dilation
        cols[:, :, t] = xp[:, :, r0:r0 + (hout - 1) * stride + 1:stride,
                           c0:c0 + (wout - 1) * stride + 1:stride]
    cols2 = cols.reshape(n, cin * kh * kw, hout * wout)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols2).reshape(n, cout, hout, wout)
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError("bias must have shape (Cout,)")
        out = out + bias.data[None, :, None, None]

    def bwd(g):
        gflat = g.reshape(n, cout, hout * wout)
        dw = np.matmul(gflat, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(wmat.T, gflat).reshape(n, cin, kh * kw, hout * wout)
        dxp = np.zeros((n, cin, hp, wp), dtype=np.float64)
        for t, (ki, kj) in enumerate(taps):
            r0 = ki * dilation
            c0 = kj * dilation
            dxp[:, :, r0:r0 + (hout - 1) * stride + 1:stride,
                c0:c0 + (wout - 1) * stride + 1:stride] += dcols[:, :, t, :].reshape(n, cin, hout, wout)
        dx = dxp[:, :, pt:pt + h, pl:pl + w]
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, bwd, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an NCHW tensor."""
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        # duplicated positions sum their gradients back to the source cell
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(data, (x,), bwd, "upsample2x")


def resize_concat(low: Tensor, skip: Tensor) -> Tensor:
    """Upsample ``low`` 2x (nearest neighbor) and concatenate channels with ``skip``."""
    up = upsample2x(low)
    if up.shape[0] != skip.shape[0] or up.shape[2:] != skip.shape[2:]:
        raise ValueError(f"irreconcilable spatial extents {up.shape} vs {skip.shape}")
    return concat([up, skip], axis=1)


# -- gradient oracle --------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a tensor-to-scalar function."""
    if h <= 0:
        raise ValueError("step h must be positive")

    def ev(arr):
        out = f(Tensor(arr))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff_grad: function returned non-finite value")
        return val

    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        flat[i] = (ev(plus.reshape(base.shape)) - ev(minus.reshape(base.shape))) / (2.0 * h)
    return grad


# -- on-disk tensor format --------------------------------------------

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize: magic 'CMDT', version u32 LE, rank u32, extents u32, f64 LE row-major."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("bad magic: not a CMDT tensor file")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    data = np.frombuffer(blob, dtype="<f8", offset=12 + 4 * rank)
    if data.size != int(np.prod(shape)):
        raise ValueError("tensor payload size does not match extents")
    return data.reshape(shape).astype(np.float64)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(np.asarray(arr)))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
