"""Differentiable primitives over :class:`Tensor`.

Binary elementwise ops broadcast like numpy; their backward rules sum the
upstream gradient back down to each operand's shape.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, UsageError
from .tensor import Tensor, as_tensor, make_node

_LOG_2PI = float(np.log(2.0 * np.pi))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- arithmetic ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return make_node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return make_node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def affine(x, scale, shift) -> Tensor:
    """Fused ``x * scale + shift`` (elementwise, broadcasting)."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd, sd = x.data, scale.data
    out = xd * sd + shift.data

    def bw(g):
        return (_unbroadcast(g * sd, xd.shape) if x.requires_grad else None,
                _unbroadcast(g * xd, sd.shape) if scale.requires_grad else None,
                _unbroadcast(g, shift.shape) if shift.requires_grad else None)
    return make_node(out, (x, scale, shift), bw, "affine")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ConfigError("matmul: scalar operands are not allowed")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ConfigError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    out = ad @ bd

    def bw(g):
        ga = gb = None
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        return ga, gb
    return make_node(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for a 2-D batch ``x`` (fused for speed)."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ConfigError(f"linear: input width {xd.shape[-1]} != weight rows {wd.shape[0]}")
    out = xd @ wd
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb
    return make_node(out, parents, bw, "linear")


def solve(a, b) -> Tensor:
    """``a^{-1} b`` for a square matrix ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or ad.shape[0] != ad.shape[1] or ad.shape[1] != bd.shape[0]:
        raise ConfigError(f"solve: shapes {ad.shape} and {bd.shape} do not conform")
    x = np.linalg.solve(ad, bd)

    def bw(g):
        gb = np.linalg.solve(ad.T, g)
        ga = None
        if a.requires_grad:
            ga = -(gb[:, None] * x[None, :] if x.ndim == 1 else gb @ x.T)
        return ga, (gb if b.requires_grad else None)
    return make_node(x, (a, b), bw, "solve")


# -- elementwise nonlinearities -------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_node(out, (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return make_node(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * ad)),), "softplus")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs(a) -> Tensor:  # noqa: A001
    """|a| with subgradient sign(a) (zero at the kink)."""
    a = as_tensor(a)
    ad = a.data
    return make_node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def soft_clamp(a, bound: float) -> Tensor:
    """``bound * tanh(a / bound)``: smooth clamp into (-bound, bound)."""
    a = as_tensor(a)
    t = np.tanh(a.data / bound)
    return make_node(bound * t, (a,), lambda g: (g * (1.0 - t * t),), "soft_clamp")


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    axes = _norm_axis(axis, a.ndim)
    m = ad.max(axis=axes, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axes, keepdims=True)
    out_k = m + np.log(s)
    w = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * w,)
    return make_node(out, (a,), bw, "logsumexp")


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigError(f"reshape: cannot reshape {old} into {shape}") from None
    return make_node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ConfigError(f"broadcast: cannot broadcast {old} to {shape}") from None
    return make_node(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def index(a, idx) -> Tensor:
    """Slicing/gathering; advanced indices scatter-add in the backward pass."""
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ConfigError(f"index: {exc}") from None
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return make_node(np.array(out, copy=True), (a,), bw, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise UsageError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return make_node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    out, start = [], 0
    ax = axis % a.ndim
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + s)
        out.append(index(a, tuple(sl)))
        start += s
    if start != a.shape[ax]:
        raise ConfigError(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    return out


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# -- imaging primitives ----------------------------------------------------

def conv2d_circular(x, kernel) -> Tensor:
    """Periodic 2-D convolution over the last two axes.

    ``kernel`` is a full ``(H, W)`` array in wrapped layout: its ``[0, 0]``
    entry multiplies the pixel itself, ``[-1, 0]`` the pixel above, etc.
    A unit impulse at the origin therefore maps to the kernel itself.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.shape[-2:] != kernel.shape:
        raise ConfigError(f"conv2d_circular: image {x.shape[-2:]} vs kernel {kernel.shape}")
    xd, kd = x.data, kernel.data
    kf = np.fft.rfft2(kd)
    xf = np.fft.rfft2(xd)
    hw = kd.shape
    out = np.fft.irfft2(xf * kf, s=hw)

    def bw(g):
        gf = np.fft.rfft2(g)
        gx = np.fft.irfft2(gf * np.conj(kf), s=hw) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = np.fft.irfft2(gf * np.conj(xf), s=hw)
            gk = gk.reshape(-1, *hw).sum(axis=0)
        return gx, gk
    return make_node(out, (x, kernel), bw, "conv2d_circular")


def _pair_to_complex(a: np.ndarray) -> np.ndarray:
    return a[..., 0, :, :] + 1j * a[..., 1, :, :]


def _complex_to_pair(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3)


def fft2(x) -> Tensor:
    """Unitary 2-D DFT on a real/imag channel pair ``[..., 2, H, W]``.

    The backward rule is the adjoint transform, i.e. the unitary inverse DFT.
    """
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ConfigError(f"fft2: expected [..., 2, H, W], got {x.shape}")
    out = _complex_to_pair(np.fft.fft2(_pair_to_complex(x.data), norm="ortho"))
    return make_node(out, (x,), lambda g: (_complex_to_pair(
        np.fft.ifft2(_pair_to_complex(g), norm="ortho")),), "fft2")


def ifft2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ConfigError(f"ifft2: expected [..., 2, H, W], got {x.shape}")
    out = _complex_to_pair(np.fft.ifft2(_pair_to_complex(x.data), norm="ortho"))
    return make_node(out, (x,), lambda g: (_complex_to_pair(
        np.fft.fft2(_pair_to_complex(g), norm="ortho")),), "ifft2")


# -- composites -------------------------------------------------------------

def logavgexp(a, axis=0) -> Tensor:
    """``log(mean(exp(a)))`` along ``axis`` with a max shift."""
    a = as_tensor(a)
    if a.size == 0:
        raise UsageError("logavgexp of an empty list")
    n = a.shape[axis] if a.ndim else 1
    return sub(logsumexp(a, axis=axis), float(np.log(n)))


def std_normal_logpdf(z) -> Tensor:
    """Row-wise log N(z; 0, I) for a batch ``[B, n]`` (or a single ``[n]``)."""
    z = as_tensor(z)
    n = z.shape[-1]
    return mul(sum(square(z), axis=-1), -0.5) - 0.5 * n * _LOG_2PI
