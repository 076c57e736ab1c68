"""Differentiable operations on :class:`Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` where an input
does not need one).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import Tensor, make_result

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, "add", (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, "sub", (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return make_result(ad / bd, "div", (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_result(ad ** exponent, "pow", (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]`` with broadcast batch dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map on the last axis: ``x @ weight + bias`` with weight ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (wd.shape[1],)), "linear", inputs, bw)


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, shape),)

    return make_result(a.data.mean(axis=axes, keepdims=keepdims), "mean", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
                       lambda g: (g.transpose(inv),))


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(a.data[idx]), "index", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}") from None
    return make_result(data, "concat", tensors, bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return make_result(x * cdf, "gelu", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # clipped so the output stays strictly inside (0, 1) even when saturated
    y = expit(a.data)
    info = np.finfo(y.dtype)
    y = np.clip(y, info.tiny, np.nextafter(y.dtype.type(1), y.dtype.type(0)))
    return make_result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


_UNARY = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(x, f: str, y=None) -> Tensor:
    """Dispatch a named pointwise op: relu, gelu, sigmoid (unary) or add, mul (binary)."""
    if f in _UNARY:
        return _UNARY[f](x)
    if f in _BINARY:
        if y is None:
            raise ValueError(f"elementwise {f!r} needs a second operand")
        return _BINARY[f](x, y)
    raise ValueError(f"unknown elementwise op {f!r}")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return make_result(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, "log_softmax", (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: last axis {c} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Channel-wise batch norm over axis 1 of ``[B, C, ...]``.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    xd = x.data
    red = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    if training:
        mu = xd.mean(axis=red)
        var = xd.var(axis=red)
        n = xd.size // xd.shape[1]
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(bshape)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * inv
    gd = gamma.data.reshape(bshape)

    def bw(g):
        dxhat = g * gd
        if training:
            gx = inv * (dxhat - dxhat.mean(axis=red, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=red, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(xhat * gd + beta.data.reshape(bshape), "batch_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# pooling, interpolation, convolution
# ---------------------------------------------------------------------------

def mean_pool_spatial(x: Tensor) -> Tensor:
    """Average ``[B, D, H, W, C]`` over H and W, keeping them as size-1 axes."""
    if x.ndim != 5:
        raise ValueError(f"mean_pool_spatial expects [B,D,H,W,C], got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights ``[n_out, n_in]`` with aligned corners."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1)
        lo = min(int(math.floor(src)), n_in - 2)
        frac = src - lo
        a[i, lo] += 1.0 - frac
        a[i, lo + 1] += frac
    return a


def trilinear_interpolate(p: Tensor, target) -> Tensor:
    """Resize ``[N, C, D0, H0, W0]`` to ``[N, C, *target]`` (align-corners trilinear)."""
    target = _triple(target)
    if min(target) < 1:
        raise ValueError(f"trilinear_interpolate: target extents must be >= 1, got {target}")
    if p.ndim != 5:
        raise ValueError(f"trilinear_interpolate expects a rank-5 tensor, got {p.shape}")
    src = p.shape[2:]
    if tuple(src) == target:
        return make_result(p.data.copy(), "interp", (p,), lambda g: (g,))
    ad, ah, aw = (interp_matrix(o, i, p.dtype) for o, i in zip(target, src))
    out = np.einsum("ncdhw,Dd,Hh,Ww->ncDHW", p.data, ad, ah, aw, optimize=True)

    def bw(g):
        return (np.einsum("ncDHW,Dd,Hh,Ww->ncdhw", g, ad, ah, aw, optimize=True),)

    return make_result(out, "interp", (p,), bw)


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xd: np.ndarray, groups: int, k: tuple, s: tuple, pad: tuple):
    """Patch matrix ``[B, G, Cg*K, P]`` and output extents for a grouped conv."""
    b, cin = xd.shape[:2]
    cg = cin // groups
    kvol = k[0] * k[1] * k[2]
    if kvol == 1 and s == (1, 1, 1) and pad == (0, 0, 0):
        out_sp = xd.shape[2:]
        return xd.reshape(b, groups, cg, -1), out_sp
    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else xd
    win = sliding_window_view(xp, k, axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    out_sp = win.shape[2:5]
    win = win.reshape((b, groups, cg) + win.shape[2:])
    cols = win.transpose(0, 1, 2, 6, 7, 8, 3, 4, 5).reshape(b, groups, cg * kvol, -1)
    return cols, out_sp


def _grouped_conv(xd: np.ndarray, wd: np.ndarray, groups: int, s: tuple, pad: tuple):
    cout = wd.shape[0]
    cols, out_sp = _im2col(xd, groups, tuple(wd.shape[2:]), s, pad)
    out = wd.reshape(groups, cout // groups, -1) @ cols  # [B, G, Og, P]
    return out.reshape((xd.shape[0], cout) + tuple(out_sp)), cols


def _col2im(dcols, xshape, groups, k, s, pad, out_sp):
    b, cin = xshape[:2]
    cg = cin // groups
    dcols = dcols.reshape((b, groups, cg) + tuple(k) + tuple(out_sp))
    padded = tuple(n + 2 * p for n, p in zip(xshape[2:], pad))
    dxp = np.zeros((b, groups, cg) + padded, dtype=dcols.dtype)
    for i in range(k[0]):
        for j in range(k[1]):
            for l in range(k[2]):
                dxp[:, :, :,
                    i:i + s[0] * (out_sp[0] - 1) + 1:s[0],
                    j:j + s[1] * (out_sp[1] - 1) + 1:s[1],
                    l:l + s[2] * (out_sp[2] - 1) + 1:s[2]] += dcols[:, :, :, i, j, l]
    dxp = dxp.reshape((b, cin) + padded)
    return dxp[:, :, pad[0]:pad[0] + xshape[2], pad[1]:pad[1] + xshape[3], pad[2]:pad[2] + xshape[4]]


def conv3d_grouped(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, groups: int = 1,
                   stride=1, padding=0) -> Tensor:
    """Grouped 3-D cross-correlation of ``[B, Cin, D, H, W]`` with ``[Cout, Cin/g, kd, kh, kw]``."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d: expected rank-5 input and weight, got {x.shape} and {w.shape}")
    b, cin = x.shape[:2]
    cout, cg = w.shape[:2]
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"conv3d: channels in={cin} out={cout} not divisible by groups={groups}")
    if cg * groups != cin:
        raise ValueError(f"conv3d: weight expects {cg * groups} input channels, input has {cin}")
    k = tuple(w.shape[2:])
    s = _triple(stride)
    pad = _triple(padding)
    for n, kk, pp in zip(x.shape[2:], k, pad):
        if n + 2 * pp < kk:
            raise ValueError(f"conv3d: kernel {k} larger than padded input {x.shape[2:]}")
    xd, wd = x.data, w.data
    out, cols = _grouped_conv(xd, wd, groups, s, pad)
    out_sp = out.shape[2:]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    inputs = (x, w) if bias is None else (x, w, bias)
    og = cout // groups
    npos = out_sp[0] * out_sp[1] * out_sp[2]

    def bw(g):
        gt = g.reshape(b, groups, og, npos)
        gw = None
        if w.requires_grad:
            gw = (gt @ cols.swapaxes(-1, -2)).sum(axis=0).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            if s == (1, 1, 1) and all(2 * p <= kk - 1 for p, kk in zip(pad, k)):
                # stride-1 input gradient is a full correlation with the flipped kernel
                wt = wd.reshape(groups, og, cg, *k).transpose(0, 2, 1, 3, 4, 5)
                wt = wt[..., ::-1, ::-1, ::-1].reshape(cin, og, *k)
                gp = tuple(kk - 1 - p for kk, p in zip(k, pad))
                gx, _ = _grouped_conv(np.ascontiguousarray(g), np.ascontiguousarray(wt), groups,
                                      (1, 1, 1), gp)
            else:
                dcols = wd.reshape(groups, og, -1).swapaxes(-1, -2) @ gt
                gx = _col2im(dcols, xd.shape, groups, k, s, pad, out_sp)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, "conv3d", inputs, bw)


def avg_pool3d(x: Tensor, kernel=2, stride=None) -> Tensor:
    """Window means over the last three axes of ``[B, C, D, H, W]`` (no padding, floor extents)."""
    k = _triple(kernel)
    s = k if stride is None else _triple(stride)
    if x.ndim != 5:
        raise ValueError(f"avg_pool3d expects [B,C,D,H,W], got {x.shape}")
    sp = x.shape[2:]
    if any(kk > n for kk, n in zip(k, sp)):
        raise ValueError(f"avg_pool3d: window {k} exceeds input extents {sp}")
    out_sp = tuple(_out_extent(n, kk, ss, 0) for n, kk, ss in zip(sp, k, s))
    xd = x.data
    scale = 1.0 / (k[0] * k[1] * k[2])

    def window(i, j, l):
        return (slice(None), slice(None),
                slice(i, i + s[0] * (out_sp[0] - 1) + 1, s[0]),
                slice(j, j + s[1] * (out_sp[1] - 1) + 1, s[1]),
                slice(l, l + s[2] * (out_sp[2] - 1) + 1, s[2]))

    offsets = [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]
    out = np.zeros(xd.shape[:2] + out_sp, dtype=xd.dtype)
    for off in offsets:
        out += xd[window(*off)]
    out *= scale

    def bw(g):
        gx = np.zeros_like(xd)
        gs = g * scale
        for off in offsets:
            gx[window(*off)] += gs
        return (gx,)

    return make_result(out, "avg_pool3d", (x,), bw)
