"""Dense NCHW tensors with reverse-mode differentiation.

Only the primitives the encoder/decoder and the losses need are provided.
Every op records a closure that maps the output gradient to input gradients;
``Tensor.backward`` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

__all__ = [
    "Tensor",
    "NumericError",
    "ShapeError",
    "default_dtype",
    "get_default_dtype",
    "as_tensor",
    "conv2d",
    "deconv2d",
    "batch_norm2d",
    "relu",
    "gelu",
    "global_avg_pool",
    "linear",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "squared_l2_distance",
    "take_rows",
    "concat",
    "l2_normalize",
]

_DEFAULT_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A forward op received or produced NaN/Inf."""


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values encountered")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
    )


def sum_rows(a: Tensor) -> Tensor:
    """Sum over every axis except the first: [N, ...] -> [N]."""
    axes = tuple(range(1, a.ndim))
    return _make(
        a.data.sum(axis=axes),
        (a,),
        lambda g: (np.broadcast_to(g.reshape((-1,) + (1,) * len(axes)), a.shape).copy(),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return _make(out, (x,), backward)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each row of a [N, D] tensor to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + eps
    y = x.data / norm

    def backward(g):
        return ((g - y * (y * g).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along the first axis."""
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as [Dout, Din]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    _check_finite(x.data, "linear")
    out = x.data @ w.data.T
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward)


def squared_l2_distance(a, b) -> Tensor:
    """Row-wise squared Euclidean distance; [N, D] x [N, D] -> [N] (1-D inputs give a scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"squared_l2_distance: {a.shape} vs {b.shape}")
    diff = sub(a, b)
    sq = mul(diff, diff)
    if sq.ndim == 1:
        return sum_all(sq)
    return sum_rows(sq)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    hw = h * w

    def backward(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


# -- convolution ---------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Strided view [N, C, Ho, Wo, kh, kw] over an already padded input."""
    n, c, h, w = xp.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )


def _corr(xp: np.ndarray, w: np.ndarray, sh: int, sw: int) -> np.ndarray:
    """Cross-correlation of padded input [N,Cin,H,W] with w [Cout,Cin,kh,kw]."""
    win = _windows(xp, w.shape[2], w.shape[3], sh, sw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Cout
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_adjoint(g: np.ndarray, w: np.ndarray, sh: int, sw: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_corr`` w.r.t. its input: scatter g [N,Cout,Ho,Wo] back to [N,Cin,H,W]."""
    n, _, ho, wo = g.shape
    _, cin, kh, kw = w.shape
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
    out = np.zeros((n, in_hw[0], in_hw[1], cin), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += cols[:, :, :, :, i, j]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_weight_grad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """d<corr(xp, w), g>/dw -> [Cout, Cin, kh, kw]."""
    win = _windows(xp, kh, kw, sh, sw)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x, w, b=None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation with zero padding. ``w`` is [Cout, Cin, kh, kw]."""
    x, w = as_tensor(x), as_tensor(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{wd + 2 * pw}")
    _check_finite(x.data, "conv2d")
    xp = _pad(x.data, ph, pw)
    out = _corr(xp, w.data, sh, sw)
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} vs {cout} output channels")
        out += b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = _corr_adjoint(g, w.data, sh, sw, xp.shape[2:])
            gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        if w.requires_grad:
            gw = _corr_weight_grad(xp, g, kh, kw, sh, sw)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


def deconv2d(x, w, b=None, stride=1, pad=0) -> Tensor:
    """Transposed convolution; ``w`` is [Cin, Cout, kh, kw].

    Output size is ``(H - 1) * stride - 2 * pad + k`` per spatial axis.  With
    zero bias this is exactly the adjoint of ``conv2d`` for the same weight.
    """
    x, w = as_tensor(x), as_tensor(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"deconv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"deconv2d: input has {cin} channels, weight expects {wcin}")
    if sh < 1 or sw < 1:
        raise ShapeError("deconv2d: stride must be >= 1")
    full_h = (h - 1) * sh + kh
    full_w = (wd - 1) * sw + kw
    if full_h - 2 * ph <= 0 or full_w - 2 * pw <= 0:
        raise ShapeError("deconv2d: padding removes the whole output")
    _check_finite(x.data, "deconv2d")
    full = _corr_adjoint(x.data, w.data, sh, sw, (full_h, full_w))
    out = np.ascontiguousarray(full[:, :, ph : full_h - ph, pw : full_w - pw])
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"deconv2d: bias {b.shape} vs {cout} output channels")
        out += b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gfull = _pad(g, ph, pw)
        gx = _corr(gfull, w.data, sh, sw) if x.requires_grad else None
        # x plays the role of the output gradient of the forward correlation: [Cin, Cout, kh, kw]
        gw = _corr_weight_grad(gfull, x.data, kh, kw, sh, sw) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


# -- normalization -------------------------------------------------------------

def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance); otherwise only the
    running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    _check_finite(x.data, "batch_norm2d")
    axes = (0, 2, 3)
    g4 = gamma.data[None, :, None, None]
    if training:
        count = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            dxhat = g * g4
            gx = (
                inv_std[None, :, None, None]
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            return g * g4 * inv_std[None, :, None, None], (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * g4 + beta.data[None, :, None, None]).astype(x.dtype)
    return _make(out, (x, gamma, beta), backward)
