"""Differentiable primitives.

Each function validates its operands, computes the forward value with numpy
and registers a backward closure returning one gradient per parent (``None``
for parents that need none).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import LOG_EPS, ShapeError, Tensor, as_tensor, check_finite, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    check_finite("add", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    check_finite("mul", a, b)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), _bw, "mul")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    check_finite("maximum", a, b)
    take_a = a.data >= b.data

    def _bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return make_node(np.where(take_a, a.data, b.data), (a, b), _bw, "maximum")


def affine(x, scale: float, shift: float = 0.0) -> Tensor:
    x = as_tensor(x)
    check_finite("affine", x)
    if scale == 1.0:
        out = x.data + shift
    elif shift == 0.0:
        out = x.data * scale
    else:
        out = x.data * scale + shift

    return make_node(out.astype(x.dtype, copy=False), (x,), lambda g: (g * scale,), "affine")


def relu(x) -> Tensor:
    x = as_tensor(x)
    check_finite("relu", x)
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    check_finite("sigmoid", x)
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def _bw(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), _bw, "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    check_finite("exp", x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(x, eps)``; clamped entries get zero gradient."""
    x = as_tensor(x)
    check_finite("log", x)
    clamped = np.maximum(x.data, eps)
    live = x.data >= eps

    def _bw(g):
        return (np.where(live, g / clamped, 0.0).astype(x.dtype),)

    return make_node(np.log(clamped), (x,), _bw, "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    check_finite("softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), _bw, "softmax")


# -- reductions and shape ---------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    check_finite("sum", x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def _bw(g):
        return (np.broadcast_to(np.reshape(g, kept), x.shape).copy(),)

    return make_node(np.asarray(out), (x,), _bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    check_finite("mean", x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def _bw(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, x.shape).astype(x.dtype),)

    return make_node(np.asarray(out), (x,), _bw, "mean")


def spatial_avg(x) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    if as_tensor(x).ndim < 2:
        raise ShapeError(f"spatial_avg: need at least 2 dims, got shape {as_tensor(x).shape}")
    return mean(x, axis=(-2, -1))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (np.reshape(g, x.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {ax}")
    check_finite("concat", *ts)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def _bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return make_node(np.concatenate([t.data for t in ts], axis=ax), ts, _bw, "concat")


def top_k_mean(x, k: int, largest: bool = True) -> Tensor:
    """Mean of the ``k`` largest (or smallest) entries along the last axis.

    Ties are broken by flat index: among equal values the lower index wins.
    """
    x = as_tensor(x)
    check_finite("top_k_mean", x)
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ShapeError(f"top_k_mean: k={k} outside [1, {n}] for shape {x.shape}")
    keys = -x.data if largest else x.data
    idx = np.argsort(keys, axis=-1, kind="stable")[..., :k]
    picked = np.take_along_axis(x.data, idx, axis=-1)
    out = picked.mean(axis=-1)

    def _bw(g):
        gx = np.zeros_like(x.data)
        vals = np.broadcast_to((g / k)[..., None], idx.shape).astype(x.dtype)
        np.put_along_axis(gx, idx, vals, axis=-1)
        return (gx,)

    return make_node(out, (x,), _bw, "top_k_mean")


def dropout_apply(x, keep_mask: np.ndarray, scale: float) -> Tensor:
    """Multiply by a fixed 0/1 keep-mask and rescale survivors."""
    x = as_tensor(x)
    if keep_mask.shape != x.shape:
        raise ShapeError(f"dropout_apply: mask shape {keep_mask.shape} != input shape {x.shape}")
    check_finite("dropout_apply", x)
    factor = (keep_mask * scale).astype(x.dtype)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,), "dropout_apply")


# -- dense layers -------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        parents.append(bias)
        out = out + bias.data
    check_finite("linear", *parents)

    def _bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_node(out, parents, _bw, "linear")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights (im2col)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        parents.append(bias)
    check_finite("conv2d", *parents)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, ho, wo, c, kh, kw) -> rows of the im2col matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def _bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        grads = [None, gw]
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            grads[0] = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return make_node(np.ascontiguousarray(out), parents, _bw, "conv2d")


# -- interpolation ------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(t, out_h: int, out_w: int, detach: bool = False) -> Tensor:
    """Align-corners bilinear resize over the two trailing axes.

    With ``detach`` the result is cut from the graph: no gradient ever
    reaches ``t`` through it.
    """
    t = as_tensor(t)
    if t.ndim < 2:
        raise ShapeError(f"bilinear_upsample: need at least 2 dims, got shape {t.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_upsample: zero-sized target ({out_h}, {out_w}) for input {t.shape}")
    h, w = t.shape[-2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target ({out_h}, {out_w}) smaller than input {t.shape}")
    check_finite("bilinear_upsample", t)
    mh = _interp_matrix(h, out_h, t.dtype)
    mw = _interp_matrix(w, out_w, t.dtype)
    out = mh @ t.data @ mw.T

    def _bw(g):
        return (mh.T @ g @ mw,)

    return make_node(out, (t,), _bw, "bilinear_upsample", detach=detach)


def detach(t) -> Tensor:
    t = as_tensor(t)
    return make_node(t.data, (t,), lambda g: (None,), "detach", detach=True)


def pick(p, index: np.ndarray) -> Tensor:
    """Gather ``p[i, index[i]]`` for a (n, c) tensor; returns shape (n,)."""
    p = as_tensor(p)
    index = np.asarray(index, dtype=int)
    if p.ndim != 2 or index.shape != (p.shape[0],):
        raise ShapeError(f"pick: index shape {index.shape} incompatible with input shape {p.shape}")
    rows = np.arange(p.shape[0])

    def _bw(g):
        gp = np.zeros_like(p.data)
        gp[rows, index] = g
        return (gp,)

    return make_node(p.data[rows, index], (p,), _bw, "pick")


PRIMITIVES = {
    "conv2d": conv2d,
    "linear": linear,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "add": add,
    "mul": mul,
    "max": maximum,
    "affine": affine,
    "spatial_avg": spatial_avg,
    "top_k_mean": top_k_mean,
    "bilinear_upsample": bilinear_upsample,
    "reshape": reshape,
    "concat": concat,
    "dropout_apply": dropout_apply,
    "sum": sum,
    "mean": mean,
    "pick": pick,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_op("relu", [x])``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)

