"""Differentiable primitives.

Each op computes its forward value with numpy and returns a node whose
backward closure yields one gradient per input (``None`` for inputs that do
not need one).  Shapes must match exactly; the only broadcasting is a scalar
``scale`` and the bias vectors of ``linear`` / ``conv3d``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeMismatch, Tensor, make_node


class NonIntegralOutput(ValueError):
    pass


class NotDivisibleByPatch(ValueError):
    pass


class IndivisibleHeads(ValueError):
    pass


def _same_shape(*ts):
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeMismatch(f"shapes differ: {[t.shape for t in ts]}")


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise -------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_shape(a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_shape(a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_shape(a, b)
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    c = a.data.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(a):
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    inner = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * d,)

    return make_node(out.astype(a.dtype), (a,), backward, "gelu")


def sum(a):  # noqa: A001 - mirrors numpy naming
    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                     lambda g: (np.full(a.shape, g, dtype=a.dtype),), "sum")


def mean(a):
    n = a.size
    return make_node(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                     lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


# -- linear algebra -------------------------------------------------------------------

def linear(x, w, b=None):
    """x [N, in] @ w [in, out] (+ b [out])."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} does not match out dim {w.shape[1]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_node(out, inputs, backward, "linear")


def matmul(a, b):
    """Batched matrix product over the last two axes; batch axes must match exactly."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    return make_node(
        out, (a, b),
        lambda g: (np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)),
        "matmul",
    )


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (a,), backward, "softmax")


def _normalize_backward(g_hat, xhat, inv_std, axis):
    n = int(np.prod([xhat.shape[a] for a in np.atleast_1d(axis)]))
    s1 = g_hat.sum(axis=axis, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axis, keepdims=True)
    return inv_std * (g_hat - s1 / n - xhat * s2 / n)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise standardisation of x [N, d] followed by gamma * . + beta."""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        return (
            _normalize_backward(g * gamma.data, xhat, inv_std, 1),
            (g * xhat).sum(axis=0),
            g.sum(axis=0),
        )

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-channel standardisation of x [C, D, H, W] over its spatial axes, then affine."""
    if x.ndim != 4 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise ShapeMismatch(f"instance_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (1, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    gcol = gamma.data.reshape(-1, 1, 1, 1)
    out = xhat * gcol + beta.data.reshape(-1, 1, 1, 1)

    def backward(g):
        return (
            _normalize_backward(g * gcol, xhat, inv_std, axes),
            (g * xhat).sum(axis=axes),
            g.sum(axis=axes),
        )

    return make_node(out, (x, gamma, beta), backward, "instance_norm")


# -- convolution / resampling ---------------------------------------------------------

def conv_output_size(n, k, stride, pad):
    # floor semantics: with odd kernels a strided conv on an even extent never divides exactly
    span = n + 2 * pad - k
    if span < 0:
        raise NonIntegralOutput(f"extent {n} with kernel {k}, stride {stride}, pad {pad}")
    return span // stride + 1


def conv3d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of x [Ci, D, H, W] with w [Co, Ci, k, k, k], zero padding.

    Lowered to one matrix product over an im2col buffer [Ci*k^3, D'H'W'];
    the buffer is kept for the weight gradient.
    """
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv3d: x {x.shape} incompatible with kernel {w.shape}")
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeMismatch(f"conv3d: kernel must be cubic with odd extent, got {w.shape[2:]}")
    if b is not None and b.shape != (co,):
        raise ShapeMismatch(f"conv3d: bias {b.shape} does not match {co} output channels")
    out_dims = tuple(conv_output_size(n, k, stride, pad) for n in x.shape[1:])
    m = int(np.prod(out_dims))
    xp = np.pad(x.data, ((0, 0),) + ((pad, pad),) * 3) if pad else x.data
    if k == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, ::stride][
            :, :out_dims[0], :out_dims[1], :out_dims[2]]).reshape(ci, m)
    else:
        win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
        win = win[:, :out_dims[0], :out_dims[1], :out_dims[2]]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(ci * k ** 3, m)
    w2 = w.data.reshape(co, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        g2 = g.reshape(co, m)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape((ci, k, k, k) + out_dims)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            d, h, ww = out_dims
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        gxp[:, a:a + stride * (d - 1) + 1:stride,
                            bb:bb + stride * (h - 1) + 1:stride,
                            c:c + stride * (ww - 1) + 1:stride] += gcols[:, a, bb, c]
            gx = gxp[:, pad:xp.shape[1] - pad, pad:xp.shape[2] - pad, pad:xp.shape[3] - pad] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return make_node(out.reshape((co,) + out_dims), inputs, backward, "conv3d")


def _interp_matrix(n_in, factor, dtype):
    """(n_in * factor, n_in) linear-interpolation matrix, align-corners-false, edge clamped."""
    n_out = n_in * factor
    c = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = c - lo
    mat = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def upsample_trilinear(x, factor):
    """Integer-factor trilinear upsampling of x [C, D, H, W]; backward is the transpose map."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return make_node(x.data.copy(), (x,), lambda g: (g,), "upsample")
    mats = [_interp_matrix(n, factor, x.dtype) for n in x.shape[1:]]
    out = np.einsum("cdhw,Dd,Hh,Ww->cDHW", x.data, *mats, optimize=True)

    def backward(g):
        return (np.einsum("cDHW,Dd,Hh,Ww->cdhw", g, *mats, optimize=True),)

    return make_node(out, (x,), backward, "upsample")


# -- data movement -----------------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inv),), "permute")


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def patch_grid(shape, p):
    c, d, h, w = shape
    if d % p or h % p or w % p:
        raise NotDivisibleByPatch(f"spatial dims {(d, h, w)} not divisible by patch size {p}")
    return d // p, h // p, w // p


def patchify(x, p):
    """[C, D, H, W] -> [N, P^3 * C]; tokens in raster order, features ordered (pd, ph, pw, c)."""
    c = x.shape[0]
    nd, nh, nw = patch_grid(x.shape, p)
    out = (x.data.reshape(c, nd, p, nh, p, nw, p)
           .transpose(1, 3, 5, 2, 4, 6, 0)
           .reshape(nd * nh * nw, p ** 3 * c))

    def backward(g):
        return (g.reshape(nd, nh, nw, p, p, p, c).transpose(6, 0, 3, 1, 4, 2, 5).reshape(x.shape),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "patchify")


def unpatchify(tokens, p, grid):
    """Inverse of patchify: [N, P^3 * C] with patch grid (nd, nh, nw) -> [C, nd*P, nh*P, nw*P]."""
    nd, nh, nw = grid
    n, width = tokens.shape
    if n != nd * nh * nw or width % p ** 3:
        raise ShapeMismatch(f"unpatchify: tokens {tokens.shape} vs grid {grid} and patch {p}")
    c = width // p ** 3
    out = (tokens.data.reshape(nd, nh, nw, p, p, p, c)
           .transpose(6, 0, 3, 1, 4, 2, 5)
           .reshape(c, nd * p, nh * p, nw * p))

    def backward(g):
        return (g.reshape(c, nd, p, nh, p, nw, p).transpose(1, 3, 5, 2, 4, 6, 0).reshape(n, width),)

    return make_node(np.ascontiguousarray(out), (tokens,), backward, "unpatchify")


# -- composites ------------------------------------------------------------------------

def multi_head_attention(z, heads, wq, wk, wv, wo):
    """Scaled dot-product self-attention over tokens z [N, d] with ``heads`` heads."""
    if z.ndim != 2:
        raise ShapeMismatch(f"attention expects [N, d] tokens, got {z.shape}")
    n, d = z.shape
    if d % heads:
        raise IndivisibleHeads(f"hidden dim {d} not divisible by {heads} heads")
    for w in (wq, wk, wv, wo):
        if w.shape != (d, d):
            raise ShapeMismatch(f"attention weights must be ({d}, {d}), got {w.shape}")
    dh = d // heads
    q = permute(reshape(linear(z, wq), (n, heads, dh)), (1, 0, 2))
    k = permute(reshape(linear(z, wk), (n, heads, dh)), (1, 2, 0))
    v = permute(reshape(linear(z, wv), (n, heads, dh)), (1, 0, 2))
    attn = softmax(scale(matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1)
    ctx = reshape(permute(matmul(attn, v), (1, 0, 2)), (n, d))
    return linear(ctx, wo)


def dice_loss(logits, onehot, eps=1e-5):
    """1 - mean_c (2 sum p g + eps) / (sum p^2 + sum g^2 + eps), p = softmax over axis 0."""
    g_arr = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=logits.dtype)
    if g_arr.shape != logits.shape:
        raise ShapeMismatch(f"dice_loss: logits {logits.shape} vs one-hot {g_arr.shape}")
    c = logits.shape[0]
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    axes = tuple(range(1, logits.ndim))
    inter = (p * g_arr).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (g_arr * g_arr).sum(axis=axes) + eps
    num = 2.0 * inter + eps
    loss = 1.0 - float((num / denom).mean())

    def backward(g):
        shape = (c,) + (1,) * (logits.ndim - 1)
        dn = (2.0 * g_arr * denom.reshape(shape) - num.reshape(shape) * 2.0 * p) / (denom ** 2).reshape(shape)
        dp = -g * dn / c
        return (p * (dp - (dp * p).sum(axis=0, keepdims=True)),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "dice_loss")


def one_hot(labels, num_classes, dtype=np.float32):
    labels = np.asarray(labels)
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(dtype)
