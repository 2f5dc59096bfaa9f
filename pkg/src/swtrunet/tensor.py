"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded graph once in reverse
topological order and accumulates gradients into leaves that require them.

Broadcasting is restricted to leading dimensions: in a binary op the smaller
operand's shape must be a suffix of the larger one's (``matmul`` additionally
broadcasts its batch dimensions). Anything else needs an explicit reshape.

GELU uses the tanh approximation
``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "GradCheckError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "add",
    "mul",
    "div",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "pad",
    "roll",
    "concat",
    "exp",
    "log",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "group_norm",
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "take",
    "grad_check",
]

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an op is used outside its contract (e.g. non-scalar backward)."""


class GradCheckError(ArithmeticError):
    """A gradient check hit a non-finite value at coordinate ``index``."""

    def __init__(self, index: int, message: str):
        super().__init__(f"coordinate {index}: {message}")
        self.index = index


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that requires it with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward on a tensor that is not part of a recorded graph")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
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
    return order


def _check_suffix(a: tuple, b: tuple, op: str) -> tuple:
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {a} and {b} are not leading-dim broadcastable")
    return big


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``g`` to ``shape`` by summing over broadcast dimensions."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _sum_to(g, sa), _sum_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _sum_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _sum_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)
    _check_suffix(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _sum_to(g / bd, ad.shape) if a.requires_grad else None
        gb = _sum_to(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}: {exc}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # weight matrix shared over the batch: one large GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# -- reductions and shape ops -----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def _getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward, "getitem")


def pad(x: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero-pad; ``widths`` is one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if all(w == (0, 0) for w in widths):
        return x
    crop = tuple(slice(b, n + b) for (b, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[crop],), "pad")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return x
    back = tuple(-s for s in shifts)
    return _make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: shapes {shapes}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]``; duplicated indices accumulate gradient."""
    index = np.asarray(index)
    shape, dtype = table.shape, table.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(table.data[index], (table,), backward, "take")


# -- activations ---------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_A * (xd * xd * xd)))

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# -- normalization -------------------------------------------------------------

def _normalize_backward(gy, xhat, inv_std, axes):
    n = np.prod([xhat.shape[a] for a in axes])
    m1 = gy.sum(axis=axes, keepdims=True) / n
    m2 = (gy * xhat).sum(axis=axes, keepdims=True) / n
    return inv_std * (gy - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} for width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    gd = gamma.data

    def backward(g):
        gx = _normalize_backward(g * gd, xhat, inv_std, (-1,)) if x.requires_grad else None
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of a ``[b, c, h, w]`` map with per-channel affine."""
    b, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv_std).reshape(b, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1)

    def backward(g):
        gx = None
        if x.requires_grad:
            gy = (g * gd).reshape(b, groups, -1)
            gx = _normalize_backward(gy, xhat.reshape(b, groups, -1), inv_std, (-1,)).reshape(b, c, h, w)
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    return _make(out, (x, gamma, beta), backward, "group_norm")


# -- convolution, pooling, resampling -----------------------------------------

def _out_extent(n: int, k: int, stride: int, padding: int, op: str) -> int:
    out = (n + 2 * padding - k) // stride + 1
    if out <= 0:
        raise DimensionError(f"{op}: input extent {n} with kernel {k}, stride {stride}, "
                             f"padding {padding} gives non-positive output extent")
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[b, c, h, w]`` with ``weight[o, c, kh, kw]``."""
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {cw}")
    ho = _out_extent(h, kh, stride, padding, "conv2d")
    wo = _out_extent(w, kw, stride, padding, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # columns laid out as [b, ho, wo, kh, kw, c] so each tap copy is contiguous in c
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(b * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gc = (gm @ wmat.T).reshape(b, ho, wo, kh, kw, c)
            gxp = np.zeros((b, xp.shape[2], xp.shape[3], c), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gc[:, :, :, i, j, :]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    b, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, padding, "maxpool2d")
    wo = _out_extent(w, kernel, stride, padding, "maxpool2d")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    best = None
    arg = np.zeros((b, c, ho, wo), dtype=np.int32)
    for i in range(kernel):
        for j in range(kernel):
            v = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            if best is None:
                best = v.copy()
            else:
                # strict '>' keeps the first maximum in scan order
                upd = v > best
                best[upd] = v[upd]
                arg[upd] = i * kernel + j

    def backward(g):
        gp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                sel = arg == i * kernel + j
                gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        return (gp[:, :, padding:padding + h, padding:padding + w] if padding else gp,)

    return _make(best, (x,), backward, "maxpool2d")


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # align_corners=False: output 2j and 2j+1 blend x[j] (0.75) with its clamped neighbour (0.25)
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., :1] += 0.25 * even[..., :1]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1:] += 0.25 * odd[..., -1:]
    return np.moveaxis(out, -1, axis)


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double the two trailing spatial extents (bilinear, align_corners=False)."""
    if mode != "bilinear":
        raise ContractError(f"upsample2x: unsupported mode {mode!r}")
    out = _upsample_axis(_upsample_axis(x.data, -1), -2)

    def backward(g):
        return (_upsample_axis_adjoint(_upsample_axis_adjoint(g, -2), -1),)

    return _make(np.ascontiguousarray(out), (x,), backward, "upsample2x")


# -- verification --------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    ``x`` is perturbed in place, so ``f`` may close over a model that owns ``x``.
    Other leaves in the graph keep whatever gradient they accumulate.
    """
    if not 1e-7 <= eps <= 1e-2:
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-2]")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    y.backward()
    analytic = x.grad.reshape(-1).astype(np.float64)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            # the realised step can differ from eps after rounding to the storage dtype
            step = float(np.asarray(orig + eps, x.dtype)) - float(np.asarray(orig - eps, x.dtype))
            fd = (fp - fm) / step
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(analytic[i])):
                raise GradCheckError(int(i), "non-finite value during gradient check")
            err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
