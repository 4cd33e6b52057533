"""Differentiable operation kernels.

Every op is a pure function triple (shape inference, forward, backward)
registered in OP_SET. Arrays are plain numpy ndarrays; layout is
channels-last: images (H, W, C), sampling grids (H, W, 2) in absolute
(row, col) pixel coordinates, vectors (N,).

Forward kernels return ``(value, saved)`` where ``saved`` is whatever the
backward pass wants cached (im2col patches, pooling argmax, interpolation
corners). Backward kernels return one gradient per input, or None for an
input that needs no gradient.
"""

from __future__ import annotations

import numpy as np

LEAKY_ALPHA = 0.2
LOG_EPS = 1e-12


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


def _fail(op, *shapes):
    raise ShapeMismatchError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(tuple(a), tuple(b))
    except ValueError:
        _fail(op, a, b)


# ---------------------------------------------------------------------------
# elementwise


def _add_fwd(attrs, a, b):
    return a + b, None


def _add_bwd(attrs, g, saved, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(attrs, a, b):
    return a - b, None


def _sub_bwd(attrs, g, saved, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(attrs, a, b):
    return a * b, None


def _mul_bwd(attrs, g, saved, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(attrs, a, b):
    return a / b, None


def _div_bwd(attrs, g, saved, a, b):
    ga = _unbroadcast(g / b, a.shape)
    gb = _unbroadcast(-g * a / (b * b), b.shape)
    return ga, gb


def _square_fwd(attrs, x):
    return x * x, None


def _square_bwd(attrs, g, saved, x):
    return (2.0 * g * x,)


def _exp_fwd(attrs, x):
    y = np.exp(x)
    return y, y


def _exp_bwd(attrs, g, y, x):
    return (g * y,)


def _log_fwd(attrs, x):
    # eps guard keeps MI finite when a histogram cell underflows to 0
    eps = attrs.get("eps", LOG_EPS)
    return np.log(x + eps), None


def _log_bwd(attrs, g, saved, x):
    eps = attrs.get("eps", LOG_EPS)
    return (g / (x + eps),)


def _scale_fwd(attrs, x):
    return x * attrs["c"], None


def _scale_bwd(attrs, g, saved, x):
    return (g * attrs["c"],)


def _relu_fwd(attrs, x):
    return np.maximum(x, 0.0), None


def _relu_bwd(attrs, g, saved, x):
    return (g * (x > 0.0),)


def _leaky_relu_fwd(attrs, x):
    a = attrs.get("alpha", LEAKY_ALPHA)
    return np.where(x > 0.0, x, a * x), None


def _leaky_relu_bwd(attrs, g, saved, x):
    a = attrs.get("alpha", LEAKY_ALPHA)
    return (np.where(x > 0.0, g, a * g),)


def _sigmoid_fwd(attrs, x):
    y = 1.0 / (1.0 + np.exp(-x))
    return y, y


def _sigmoid_bwd(attrs, g, y, x):
    return (g * y * (1.0 - y),)


def _identity_fwd(attrs, x):
    return x, None


def _identity_bwd(attrs, g, saved, x):
    return (g,)


def _same_shape(op):
    def infer(attrs, *shapes):
        return tuple(shapes[0])

    return infer


def _bcast_infer(op):
    def infer(attrs, a, b):
        return _broadcast_shape(op, a, b)

    return infer


# ---------------------------------------------------------------------------
# reductions / rearrangement


def _reduce_infer(attrs, s):
    axis = attrs.get("axis")
    if axis is None:
        return ()
    axis = axis % len(s)
    return tuple(d for i, d in enumerate(s) if i != axis)


def _sum_fwd(attrs, x):
    return np.sum(x, axis=attrs.get("axis")), None


def _sum_bwd(attrs, g, saved, x):
    axis = attrs.get("axis")
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _mean_fwd(attrs, x):
    return np.mean(x, axis=attrs.get("axis")), None


def _mean_bwd(attrs, g, saved, x):
    axis = attrs.get("axis")
    if axis is None:
        n = x.size
        return (np.broadcast_to(g / n, x.shape).copy(),)
    n = x.shape[axis]
    return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)


def _reshape_infer(attrs, s):
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(s, dtype=np.int64)):
        _fail("reshape", s, shape)
    return shape


def _reshape_fwd(attrs, x):
    return np.reshape(x, attrs["shape"]), None


def _reshape_bwd(attrs, g, saved, x):
    return (np.reshape(g, x.shape),)


def _slice_infer(attrs, s):
    start, stop = attrs["start"], attrs["stop"]
    if not (0 <= start <= stop <= s[0]):
        raise ShapeMismatchError(f"slice: [{start}:{stop}] out of bounds for axis-0 extent {s[0]}")
    return (stop - start,) + tuple(s[1:])


def _slice_fwd(attrs, x):
    return x[attrs["start"]:attrs["stop"]], None


def _slice_bwd(attrs, g, saved, x):
    out = np.zeros_like(x)
    out[attrs["start"]:attrs["stop"]] = g
    return (out,)


def _concat_infer(attrs, *shapes):
    axis = attrs.get("axis", -1)
    ref = list(shapes[0])
    axis = axis % len(ref)
    total = 0
    for s in shapes:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            _fail("concat", *shapes)
        total += s[axis]
    ref[axis] = total
    return tuple(ref)


def _concat_fwd(attrs, *xs):
    return np.concatenate(xs, axis=attrs.get("axis", -1)), None


def _concat_bwd(attrs, g, saved, *xs):
    axis = attrs.get("axis", -1)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


# ---------------------------------------------------------------------------
# dense / matmul


def _dense_infer(attrs, xs, ws, bs):
    if len(xs) != 1 or len(ws) != 2 or ws[0] != xs[0] or len(bs) != 1 or bs[0] != ws[1]:
        _fail("dense", xs, ws, bs)
    return (ws[1],)


class LazyOuter:
    """Deferred rank-1 weight gradient (x outer g); materialized on demand.

    The hypernetwork output layer's weight gradient is a ~14M-entry outer
    product consumed only by the optimizer, which can apply it without ever
    writing the full matrix.
    """

    __slots__ = ("x", "g", "shape", "dtype")

    def __init__(self, x, g):
        self.x = x
        self.g = g
        self.shape = (x.shape[0], g.shape[0])
        self.dtype = x.dtype

    def materialize(self):
        return self.x[:, None] @ self.g[None, :]

    def __add__(self, other):  # grad accumulation fallback
        return self.materialize() + (other.materialize() if isinstance(other, LazyOuter) else other)

    __radd__ = __add__


LAZY_OUTER_MIN = 1 << 20  # defer outer products above ~1M entries


def _dense_fwd(attrs, x, w, b):
    return x @ w + b, None


def _dense_bwd(attrs, g, saved, x, w, b):
    if x.shape[0] * g.shape[0] >= LAZY_OUTER_MIN:
        gw = LazyOuter(x, g)
    else:
        gw = x[:, None] @ g[None, :]
    return g @ w.T, gw, g


def _transpose_infer(attrs, s):
    if len(s) != 2:
        _fail("transpose", s)
    return (s[1], s[0])


def _transpose_fwd(attrs, x):
    return x.T, None


def _transpose_bwd(attrs, g, saved, x):
    return (g.T,)


def _matmul_infer(attrs, a, b):
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        _fail("matmul", a, b)
    return (a[0], b[1])


def _matmul_fwd(attrs, a, b):
    return a @ b, None


def _matmul_bwd(attrs, g, saved, a, b):
    return g @ b.T, a.T @ g


# ---------------------------------------------------------------------------
# conv2d: stride 1, zero-padded "same", kernel (kh, kw, Cin, Cout)


def _conv2d_infer(attrs, xs, ks):
    if len(xs) != 3 or len(ks) != 4 or ks[2] != xs[2]:
        _fail("conv2d", xs, ks)
    if ks[0] % 2 == 0 or ks[1] % 2 == 0:
        raise ShapeMismatchError(f"conv2d: kernel extents must be odd, got {tuple(ks[:2])}")
    return (xs[0], xs[1], ks[3])


def _im2col(x, kh, kw):
    H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((H + 2 * ph, W + 2 * pw, C), dtype=x.dtype)
    xp[ph:ph + H, pw:pw + W] = x
    cols = np.empty((H * W, kh * kw, C), dtype=x.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[:, k, :] = xp[i:i + H, j:j + W].reshape(H * W, C)
            k += 1
    return cols.reshape(H * W, kh * kw * C)


def _col2im(cols, shape, kh, kw):
    H, W, C = shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((H + 2 * ph, W + 2 * pw, C), dtype=cols.dtype)
    cols = cols.reshape(H * W, kh * kw, C)
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[i:i + H, j:j + W] += cols[:, k, :].reshape(H, W, C)
            k += 1
    return xp[ph:ph + H, pw:pw + W]


def _conv2d_fwd(attrs, x, k):
    H, W, C = x.shape
    kh, kw, _, co = k.shape
    cols = _im2col(x, kh, kw)
    y = cols @ k.reshape(kh * kw * C, co)
    return y.reshape(H, W, co), cols


def _conv2d_bwd(attrs, g, cols, x, k):
    H, W, C = x.shape
    kh, kw, _, co = k.shape
    g2 = g.reshape(H * W, co)
    gk = (cols.T @ g2).reshape(k.shape)
    gcols = g2 @ k.reshape(kh * kw * C, co).T
    gx = _col2im(gcols, x.shape, kh, kw)
    return gx, gk


# ---------------------------------------------------------------------------
# pooling / upsampling


def _pool_infer(attrs, s):
    n = attrs.get("size", 2)
    if len(s) != 3 or s[0] % n or s[1] % n:
        raise ShapeMismatchError(f"max_pool: spatial extents of {tuple(s)} not divisible by {n}")
    return (s[0] // n, s[1] // n, s[2])


def _max_pool_fwd(attrs, x):
    n = attrs.get("size", 2)
    H, W, C = x.shape
    xr = x.reshape(H // n, n, W // n, n, C).transpose(0, 2, 1, 3, 4).reshape(H // n, W // n, n * n, C)
    idx = xr.argmax(axis=2)
    y = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return y, idx


def _max_pool_bwd(attrs, g, idx, x):
    n = attrs.get("size", 2)
    H, W, C = x.shape
    gr = np.zeros((H // n, W // n, n * n, C), dtype=g.dtype)
    np.put_along_axis(gr, idx[:, :, None, :], g[:, :, None, :], axis=2)
    gx = gr.reshape(H // n, W // n, n, n, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
    return (gx,)


def _upsample_infer(attrs, s):
    n = attrs.get("factor", 2)
    if len(s) != 3:
        _fail("upsample_nearest", s)
    return (s[0] * n, s[1] * n, s[2])


def _upsample_fwd(attrs, x):
    n = attrs.get("factor", 2)
    return np.repeat(np.repeat(x, n, axis=0), n, axis=1), None


def _upsample_bwd(attrs, g, saved, x):
    n = attrs.get("factor", 2)
    H, W, C = x.shape
    return (g.reshape(H, n, W, n, C).sum(axis=(1, 3)),)


# ---------------------------------------------------------------------------
# spatial gradient: forward differences along one spatial axis


def _spatgrad_infer(attrs, s):
    axis = attrs["axis"]
    if axis not in (0, 1) or s[axis] < 2:
        _fail("spatial_gradient", s)
    out = list(s)
    out[axis] -= 1
    return tuple(out)


def _spatgrad_fwd(attrs, x):
    return np.diff(x, axis=attrs["axis"]), None


def _spatgrad_bwd(attrs, g, saved, x):
    axis = attrs["axis"]
    gx = np.zeros_like(x)
    lead = (slice(None),) * axis
    gx[lead + (slice(1, None),)] += g
    gx[lead + (slice(None, -1),)] -= g
    return (gx,)


# ---------------------------------------------------------------------------
# grid_sample: bilinear, border-clamped; coords are absolute (row, col) pixels


def _grid_sample_infer(attrs, imgs, gs):
    if len(imgs) != 3 or len(gs) != 3 or gs[2] != 2 or gs[0] != imgs[0] or gs[1] != imgs[1]:
        _fail("grid_sample", imgs, gs)
    return tuple(imgs)


def _grid_sample_fwd(attrs, img, coords):
    H, W, C = img.shape
    r = coords[..., 0]
    c = coords[..., 1]
    if not np.all(np.isfinite(r)) or not np.all(np.isfinite(c)):
        # map NaN/inf to the border so indexing stays valid; the training
        # loop detects the diverged state from the loss/velocity check
        r = np.nan_to_num(r, nan=0.0, posinf=H - 1.0, neginf=0.0)
        c = np.nan_to_num(c, nan=0.0, posinf=W - 1.0, neginf=0.0)
    rin = (r > 0.0) & (r < H - 1)  # clamp zone has zero coord-gradient
    cin = (c > 0.0) & (c < W - 1)
    r = np.clip(r, 0.0, H - 1.0)
    c = np.clip(c, 0.0, W - 1.0)
    r0 = np.minimum(r.astype(np.int64), H - 2) if H > 1 else np.zeros_like(r, dtype=np.int64)
    c0 = np.minimum(c.astype(np.int64), W - 2) if W > 1 else np.zeros_like(c, dtype=np.int64)
    fr = (r - r0).astype(img.dtype)
    fc = (c - c0).astype(img.dtype)

    flat = img.reshape(H * W, C)
    i00 = (r0 * W + c0).ravel()
    i01 = i00 + (1 if W > 1 else 0)
    i10 = i00 + (W if H > 1 else 0)
    i11 = i10 + (1 if W > 1 else 0)
    v00 = flat[i00].reshape(H, W, C)
    v01 = flat[i01].reshape(H, W, C)
    v10 = flat[i10].reshape(H, W, C)
    v11 = flat[i11].reshape(H, W, C)

    wr = fr[..., None]
    wc = fc[..., None]
    top = v00 * (1.0 - wc) + v01 * wc
    bot = v10 * (1.0 - wc) + v11 * wc
    out = top * (1.0 - wr) + bot * wr
    saved = (i00, i01, i10, i11, fr, fc, rin, cin, (v00, v01, v10, v11))
    return out, saved


def _grid_sample_bwd(attrs, g, saved, img, coords):
    H, W, C = img.shape
    i00, i01, i10, i11, fr, fc, rin, cin, corners = saved
    v00, v01, v10, v11 = corners
    wr = fr[..., None]
    wc = fc[..., None]

    w00 = (1.0 - wr) * (1.0 - wc)
    w01 = (1.0 - wr) * wc
    w10 = wr * (1.0 - wc)
    w11 = wr * wc

    gimg = np.zeros((H * W, C), dtype=g.dtype)
    g2 = g.reshape(H * W, C)
    np.add.at(gimg, i00, (w00.reshape(H * W, 1) * g2))
    np.add.at(gimg, i01, (w01.reshape(H * W, 1) * g2))
    np.add.at(gimg, i10, (w10.reshape(H * W, 1) * g2))
    np.add.at(gimg, i11, (w11.reshape(H * W, 1) * g2))

    dr = (v10 - v00) * (1.0 - wc) + (v11 - v01) * wc
    dc = (v01 - v00) * (1.0 - wr) + (v11 - v10) * wr
    gcoords = np.empty_like(coords)
    gcoords[..., 0] = (g * dr).sum(axis=-1) * rin
    gcoords[..., 1] = (g * dc).sum(axis=-1) * cin
    return gimg.reshape(H, W, C), gcoords


# ---------------------------------------------------------------------------
# registry


class OpSpec:
    __slots__ = ("name", "arity", "infer", "forward", "backward")

    def __init__(self, name, arity, infer, forward, backward):
        self.name = name
        self.arity = arity  # None: variadic
        self.infer = infer
        self.forward = forward
        self.backward = backward


OP_SET: dict[str, OpSpec] = {}


def _register(name, arity, infer, forward, backward):
    OP_SET[name] = OpSpec(name, arity, infer, forward, backward)


_register("add", 2, _bcast_infer("add"), _add_fwd, _add_bwd)
_register("subtract", 2, _bcast_infer("subtract"), _sub_fwd, _sub_bwd)
_register("multiply", 2, _bcast_infer("multiply"), _mul_fwd, _mul_bwd)
_register("divide", 2, _bcast_infer("divide"), _div_fwd, _div_bwd)
_register("square", 1, _same_shape("square"), _square_fwd, _square_bwd)
_register("exp", 1, _same_shape("exp"), _exp_fwd, _exp_bwd)
_register("log", 1, _same_shape("log"), _log_fwd, _log_bwd)
_register("scale", 1, _same_shape("scale"), _scale_fwd, _scale_bwd)
_register("relu", 1, _same_shape("relu"), _relu_fwd, _relu_bwd)
_register("leaky_relu", 1, _same_shape("leaky_relu"), _leaky_relu_fwd, _leaky_relu_bwd)
_register("sigmoid", 1, _same_shape("sigmoid"), _sigmoid_fwd, _sigmoid_bwd)
_register("linear", 1, _same_shape("linear"), _identity_fwd, _identity_bwd)
_register("sum", 1, _reduce_infer, _sum_fwd, _sum_bwd)
_register("mean", 1, _reduce_infer, _mean_fwd, _mean_bwd)
_register("reshape", 1, _reshape_infer, _reshape_fwd, _reshape_bwd)
_register("slice", 1, _slice_infer, _slice_fwd, _slice_bwd)
_register("channel_concat", None, _concat_infer, _concat_fwd, _concat_bwd)
_register("dense", 3, _dense_infer, _dense_fwd, _dense_bwd)
_register("matmul", 2, _matmul_infer, _matmul_fwd, _matmul_bwd)
_register("transpose", 1, _transpose_infer, _transpose_fwd, _transpose_bwd)
_register("conv2d", 2, _conv2d_infer, _conv2d_fwd, _conv2d_bwd)
_register("max_pool", 1, _pool_infer, _max_pool_fwd, _max_pool_bwd)
_register("upsample_nearest", 1, _upsample_infer, _upsample_fwd, _upsample_bwd)
_register("spatial_gradient", 1, _spatgrad_infer, _spatgrad_fwd, _spatgrad_bwd)
_register("grid_sample", 2, _grid_sample_infer, _grid_sample_fwd, _grid_sample_bwd)


def op_set():
    """Names of all catalogued differentiable operations."""
    return sorted(OP_SET)


def grid_sample_array(img, coords):
    """Bilinear border-clamped sampling on plain arrays (shared with graphs)."""
    out, _ = _grid_sample_fwd({}, img, coords)
    return out
