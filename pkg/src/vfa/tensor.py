"""Small dense tensor engine with reverse-mode differentiation.

Values live in float64 numpy arrays. Every op records its parents and a
closure that maps the output adjoint to input adjoints; ``backward`` walks
the recorded graph once in reverse topological order.

The op set is closed: it covers exactly what the attention operator, the
model, and the losses need.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(out: np.ndarray, op: str) -> None:
    # a single reduction is NaN/Inf whenever any element is
    if not math.isfinite(float(np.add.reduce(out, axis=None))):
        if not np.isfinite(out).all():
            raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a} with {b}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the adjoint at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), backward, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch.

    ``b`` is either batched like ``a`` or a plain 2-D matrix shared by the
    whole batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias) with ``weight`` of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    k, n = wd.shape
    out = xd @ wd
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = xd.reshape(-1, k).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def _check_perm(axes: Sequence[int], rank: int) -> tuple[int, ...]:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(rank)):
        raise ValueError(f"{axes} is not a permutation of {rank} axes")
    return axes


def inverse_permutation(axes: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(axes)
    for i, a in enumerate(axes):
        inv[a] = i
    return tuple(inv)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = _check_perm(axes, x.ndim)
    inv = inverse_permutation(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (g.transpose(inv),), "permute")


def pad_trailing(x: Tensor, pads: Sequence[int]) -> Tensor:
    """Zero-pad each axis at its trailing edge by ``pads[i]`` entries."""
    if len(pads) != x.ndim:
        raise DimensionError(f"pad spec {pads} does not match rank {x.ndim}")
    if not any(pads):
        return x
    src = x.shape
    out = np.pad(x.data, [(0, int(p)) for p in pads])
    index = tuple(slice(0, n) for n in src)
    return _make(out, (x,), lambda g: (g[index],), "pad")


def crop_leading(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Keep the leading ``shape`` block; inverse of ``pad_trailing``."""
    if tuple(shape) == x.shape:
        return x
    src = x.shape
    index = tuple(slice(0, int(n)) for n in shape)

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), backward, "crop")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return x
    back = tuple(-s for s in shifts)
    return _make(np.roll(x.data, shifts, axes), (x,),
                 lambda g: (np.roll(g, back, axes),), "roll")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table: out[...] = table[index[...]]."""
    index = np.asarray(index, dtype=np.intp)
    rows, width = table.shape

    def backward(g):
        flat = index.ravel()
        g2 = g.reshape(-1, width)
        gt = np.empty((rows, width), dtype=DTYPE)
        for j in range(width):
            gt[:, j] = np.bincount(flat, weights=g2[:, j], minlength=rows)
        return (gt,)

    return _make(table.data[index], (table,), backward, "take_rows")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes), dtype=DTYPE), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tensor_sum(x, axes), 1.0 / count)


# ---------------------------------------------------------------- fused ops


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad or bias.requires_grad:
            g2 = g.reshape(-1, n)
            gw = (g2 * xhat.reshape(-1, n)).sum(axis=0)
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gh = g * weight.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward, "layer_norm")


def _unfold(xd: np.ndarray, kernel: Sequence[int]) -> tuple[np.ndarray, tuple[int, ...]]:
    b, t, h, w, c = xd.shape
    kt, kh, kw = kernel
    grid = (t // kt, h // kh, w // kw)
    cols = xd.reshape(b, grid[0], kt, grid[1], kh, grid[2], kw, c)
    cols = cols.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(b * grid[0] * grid[1] * grid[2], kt * kh * kw * c)
    return cols, grid


def conv3d_as_patches(x: Tensor, weight: Tensor, bias: Tensor | None,
                      kernel: Sequence[int], stride: Sequence[int] | None = None) -> Tensor:
    """Non-overlapping 3-D convolution over (B, T, H, W, Cin) input.

    ``weight`` has shape (kt*kh*kw*Cin, Cout) with rows ordered (t, h, w, cin).
    Extents not divisible by the kernel are zero-padded at the trailing edge.
    """
    kernel = tuple(int(k) for k in kernel)
    if stride is not None and tuple(stride) != kernel:
        raise ValueError("patch convolution requires stride == kernel")
    if x.ndim != 5:
        raise DimensionError(f"expected (B, T, H, W, C) input, got {x.shape}")
    b, t, h, w, c = x.shape
    if min(t, h, w) == 0:
        raise ValueError(f"empty input {x.shape}")
    kvol = kernel[0] * kernel[1] * kernel[2] * c
    if weight.shape[0] != kvol:
        raise DimensionError(f"kernel weight {weight.shape} does not match patch size {kvol}")
    pads = [0] + [(-n) % k for n, k in zip((t, h, w), kernel)] + [0]
    x = pad_trailing(x, pads)
    xd = x.data
    cols, grid = _unfold(xd, kernel)
    cout = weight.shape[1]
    out = cols @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(b, *grid, cout)
    wd = weight.data
    kt, kh, kw = kernel

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gc = (g2 @ wd.T).reshape(b, grid[0], grid[1], grid[2], kt, kh, kw, c)
            gx = gc.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(xd.shape)
        if weight.requires_grad:
            gw = cols.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv3d_patches")


# ---------------------------------------------------------------- backward


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(loss)/d(node) through the recorded graph.

    Trainable leaves receive (accumulate into) ``.grad``. When ``params`` is
    given, their gradients are also returned in order; a parameter the loss
    does not depend on gets zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape, dtype=DTYPE)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return None
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros(p.shape, dtype=DTYPE) if g is None else g)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
