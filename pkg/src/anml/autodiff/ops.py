"""Differentiable primitives.

Each backward rule is expressed through other primitives in this module, so
gradients recorded under ``create_graph=True`` can be differentiated again.
Where a backward rule needs a forward intermediate that depends on an input,
it recomputes it as a node while recording and falls back to the cached array
otherwise.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .engine import GraphError, Tensor, is_recording, make_node


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_error(op: str, *shapes, detail: str = "") -> GraphError:
    msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
    return GraphError(msg + (f" ({detail})" if detail else ""))


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("add", a, b)
    return make_node(a.data + b.data, "add", (a, b), _add_bwd)


def _add_bwd(out, g, needs):
    a, b = out.parents
    return (
        sum_to(g, a.shape) if needs[0] else None,
        sum_to(g, b.shape) if needs[1] else None,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("sub", a, b)
    return make_node(a.data - b.data, "sub", (a, b), _sub_bwd)


def _sub_bwd(out, g, needs):
    a, b = out.parents
    return (
        sum_to(g, a.shape) if needs[0] else None,
        scale(sum_to(g, b.shape), -1.0) if needs[1] else None,
    )


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape("mul", a, b)
    return make_node(a.data * b.data, "mul", (a, b), _mul_bwd)


def _mul_bwd(out, g, needs):
    a, b = out.parents
    return (
        sum_to(mul(g, b), a.shape) if needs[0] else None,
        sum_to(mul(g, a), b.shape) if needs[1] else None,
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data.dtype.type(c), "scale", (a,), _scale_bwd, c)


def _scale_bwd(out, g, needs):
    return (scale(g, out.ctx),)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data + a.data.dtype.type(c), "add_scalar", (a,), _add_scalar_bwd)


def _add_scalar_bwd(out, g, needs):
    return (g,)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data ** a.data.dtype.type(p), "pow", (a,), _pow_bwd, p)


def _pow_bwd(out, g, needs):
    (a,) = out.parents
    p = out.ctx
    return (mul(g, scale(pow_const(a, p - 1), p)),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.exp(a.data), "exp", (a,), _exp_bwd)


def _exp_bwd(out, g, needs):
    return (mul(g, out),)


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), "log", (a,), _log_bwd)


def _log_bwd(out, g, needs):
    (a,) = out.parents
    return (mul(g, pow_const(a, -1.0)),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.maximum(a.data, 0), "relu", (a,), _relu_bwd)


def _relu_bwd(out, g, needs):
    (a,) = out.parents
    # The mask is piecewise constant, so it enters the gradient graph as a constant.
    return (mul(g, Tensor((a.data > 0).astype(g.dtype))),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(-np.logaddexp(0, -a.data)).astype(a.dtype, copy=False)
    return make_node(data, "sigmoid", (a,), _sigmoid_bwd)


def _sigmoid_bwd(out, g, needs):
    return (mul(g, mul(out, add_scalar(scale(out, -1.0), 1.0))),)


# ---------------------------------------------------------------- shape ops


def where(mask, a, b) -> Tensor:
    """``a`` where the constant boolean ``mask`` holds, else ``b`` (same shapes)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    if not (mask.shape == a.shape == b.shape):
        raise _shape_error("where", mask.shape, a.shape, b.shape)
    return make_node(np.where(mask, a.data, b.data), "where", (a, b), _where_bwd, mask)


def _where_bwd(out, g, needs):
    keep = out.ctx.astype(g.dtype)
    return (
        mul(g, keep) if needs[0] else None,
        mul(g, 1.0 - keep) if needs[1] else None,
    )


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, tuple(shape)) from None
    return make_node(data, "reshape", (a,), _reshape_bwd)


def _reshape_bwd(out, g, needs):
    return (reshape(g, out.parents[0].shape),)


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return make_node(a.data.transpose(axes), "transpose", (a,), _transpose_bwd, axes)


def _transpose_bwd(out, g, needs):
    return (transpose(g, tuple(np.argsort(out.ctx))),)


def _swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise _shape_error("broadcast_to", a.shape, shape) from None
    return make_node(data, "broadcast_to", (a,), _broadcast_bwd)


def _broadcast_bwd(out, g, needs):
    return (sum_to(g, out.parents[0].shape),)


def sum_to(a, shape: Sequence[int]) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast_to)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return make_node(_sum_to_array(a.data, shape), "sum_to", (a,), _sum_to_bwd)


def _sum_to_bwd(out, g, needs):
    return (broadcast_to(g, out.parents[0].shape),)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if axis is None:
        axis = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axis = (axis,)
    axis = tuple(ax % a.ndim for ax in axis) if a.ndim else ()
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    return make_node(np.asarray(data, dtype=a.dtype), "sum", (a,), _sum_bwd, axis)


def _sum_bwd(out, g, needs):
    (a,) = out.parents
    kept = tuple(1 if i in out.ctx else s for i, s in enumerate(a.shape))
    return (broadcast_to(reshape(g, kept), a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    s = sum(a, axis, keepdims)
    count = a.size // max(s.size, 1) if a.size else 1
    return scale(s, 1.0 / count)


def rows(a, start: int, stop: int) -> Tensor:
    """Slice along the leading axis."""
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise GraphError(f"rows: slice [{start}:{stop}] out of range for shape {a.shape}")
    return make_node(a.data[start:stop], "rows", (a,), _rows_bwd, (start, stop))


def _rows_bwd(out, g, needs):
    start, _ = out.ctx
    return (pad_rows(g, start, out.parents[0].shape[0]),)


def pad_rows(a, start: int, total: int) -> Tensor:
    a = as_tensor(a)
    data = np.zeros((total,) + a.shape[1:], dtype=a.dtype)
    data[start : start + a.shape[0]] = a.data
    return make_node(data, "pad_rows", (a,), _pad_rows_bwd, start)


def _pad_rows_bwd(out, g, needs):
    a = out.parents[0]
    return (rows(g, out.ctx, out.ctx + a.shape[0]),)


def pad2d(a, p: int) -> Tensor:
    a = as_tensor(a)
    if p == 0:
        return a
    data = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    return make_node(data, "pad2d", (a,), _pad2d_bwd, p)


def _pad2d_bwd(out, g, needs):
    return (crop2d(g, out.ctx),)


def crop2d(a, p: int) -> Tensor:
    a = as_tensor(a)
    if p == 0:
        return a
    return make_node(a.data[:, :, p:-p, p:-p], "crop2d", (a,), _crop2d_bwd, p)


def _crop2d_bwd(out, g, needs):
    return (pad2d(g, out.ctx),)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    return make_node(np.matmul(a.data, b.data), "matmul", (a, b), _matmul_bwd)


def _matmul_bwd(out, g, needs):
    a, b = out.parents
    return (
        sum_to(matmul(g, _swap_last(b)), a.shape) if needs[0] else None,
        sum_to(matmul(_swap_last(a), g), b.shape) if needs[1] else None,
    )


def affine(x, w, b=None) -> Tensor:
    """Fully connected layer ``x @ w.T + b`` with ``w`` shaped (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error("affine", x.shape, w.shape)
    data = x.data @ w.data.T
    if b is None:
        return make_node(data, "affine", (x, w), _affine_bwd)
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise _shape_error("affine", w.shape, b.shape, detail="bias must match output width")
    return make_node(data + b.data, "affine", (x, w, b), _affine_bwd)


def _affine_bwd(out, g, needs):
    x, w = out.parents[:2]
    grads = [
        matmul(g, w) if needs[0] else None,
        matmul(transpose(g), x) if needs[1] else None,
    ]
    if len(out.parents) == 3:
        grads.append(sum(g, axis=0) if needs[2] else None)
    return grads


# ---------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _im2col_array(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)


def _col2im_array(cols: np.ndarray, shape, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = shape
    oh, ow = _conv_out(h, kh, stride), _conv_out(w, kw, stride)
    c6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    he, we = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + he : stride, j : j + we : stride] += c6[:, :, i, j]
    return out


def im2col(x, kh: int, kw: int, stride: int = 1) -> Tensor:
    """Unfold (N, C, H, W) into patches (N, OH*OW, C*kh*kw)."""
    x = as_tensor(x)
    return make_node(_im2col_array(x.data, kh, kw, stride), "im2col", (x,), _im2col_bwd, (kh, kw, stride))


def _im2col_bwd(out, g, needs):
    kh, kw, stride = out.ctx
    return (col2im(g, out.parents[0].shape, kh, kw, stride),)


def col2im(cols, shape, kh: int, kw: int, stride: int = 1) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    cols = as_tensor(cols)
    shape = tuple(shape)
    data = _col2im_array(cols.data, shape, kh, kw, stride)
    return make_node(data, "col2im", (cols,), _col2im_bwd, (kh, kw, stride))


def _col2im_bwd(out, g, needs):
    kh, kw, stride = out.ctx
    return (im2col(g, kh, kw, stride),)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, NCHW input and (O, C, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape, detail="expected NCHW input and OCHW kernel")
    if stride < 1 or padding < 0:
        raise GraphError(f"conv2d: invalid stride={stride} padding={padding}")
    x = pad2d(x, padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h < kh or wd < kw:
        raise _shape_error("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    oh, ow = _conv_out(h, kh, stride), _conv_out(wd, kw, stride)
    cols = _im2col_array(x.data, kh, kw, stride)
    y = np.matmul(cols, w.data.reshape(o, -1).T).transpose(0, 2, 1).reshape(n, o, oh, ow)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise _shape_error("conv2d", w.shape, b.shape, detail="bias must match output channels")
        y = y + b.data.reshape(1, o, 1, 1)
        parents = (x, w, b)
    return make_node(y, "conv2d", parents, _conv2d_bwd, (kh, kw, stride, cols))


def _conv2d_bwd(out, g, needs):
    x, w = out.parents[:2]
    kh, kw, stride, cols = out.ctx
    n, o, oh, ow = g.shape
    g2 = reshape(g, (n, o, oh * ow))
    grads = [None, None]
    if needs[0]:
        gcols = matmul(transpose(g2, (0, 2, 1)), reshape(w, (o, -1)))
        grads[0] = col2im(gcols, x.shape, kh, kw, stride)
    if needs[1]:
        c = im2col(x, kh, kw, stride) if is_recording() and x.requires_grad else Tensor(cols)
        grads[1] = reshape(sum(matmul(g2, c), axis=0), w.shape)
    if len(out.parents) == 3:
        grads.append(sum(g, axis=(0, 2, 3)) if needs[2] else None)
    return grads


# ---------------------------------------------------------------- normalization


def _reduced_count(shape, axes) -> int:
    return int(np.prod([shape[a] for a in axes]))


def _rstd(x, axes: tuple[int, ...], eps: float) -> Tensor:
    """1 / sqrt(var(x) + eps) over ``axes``, kept as broadcastable dims."""
    x = as_tensor(x)
    var = x.data.var(axis=axes, keepdims=True)
    data = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    return make_node(data, "bn_rstd", (x,), _rstd_bwd, (axes, eps))


def _rstd_bwd(out, g, needs):
    (x,) = out.parents
    axes, _ = out.ctx
    m = _reduced_count(x.shape, axes)
    centered = sub(x, mean(x, axis=axes, keepdims=True))
    return (scale(mul(mul(g, pow_const(out, 3.0)), centered), -1.0 / m),)


def _normalize(x, axes: tuple[int, ...], eps: float) -> Tensor:
    x = as_tensor(x)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    return make_node((x.data - mu) * rstd, "bn_normalize", (x,), _normalize_bwd, (axes, eps, rstd))


def _normalize_bwd(out, g, needs):
    (x,) = out.parents
    axes, eps, rstd = out.ctx
    r = _rstd(x, axes, eps) if is_recording() else Tensor(rstd)
    m1 = mean(g, axis=axes, keepdims=True)
    m2 = mean(mul(g, out), axis=axes, keepdims=True)
    return (mul(sub(sub(g, m1), mul(out, m2)), r),)


def _channel_shape(x: Tensor) -> tuple[int, ...]:
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _channel_affine(xhat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    cs = _channel_shape(xhat)
    data = xhat.data * gamma.data.reshape(cs) + beta.data.reshape(cs)
    return make_node(data, "bn_affine", (xhat, gamma, beta), _channel_affine_bwd)


def _channel_affine_bwd(out, g, needs):
    xhat, gamma, _ = out.parents
    red = tuple(i for i in range(g.ndim) if i != 1)
    return (
        mul(g, reshape(gamma, _channel_shape(xhat))) if needs[0] else None,
        sum(mul(g, xhat), axis=red) if needs[1] else None,
        sum(g, axis=red) if needs[2] else None,
    )


def batch_norm(x, gamma, beta, per_instance: bool = False, eps: float = 1e-5) -> Tensor:
    """Normalize with current-batch statistics per channel (axis 1).

    Statistics pool the batch and spatial axes.  ``per_instance`` pools the
    spatial axes of each sample separately, which is exactly what a batch of
    one sample would see; it lets a batch be evaluated as independent
    single-sample forward passes.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batchnorm", x.shape, gamma.shape, beta.shape)
    spatial = tuple(range(2, x.ndim))
    axes = spatial if per_instance else (0,) + spatial
    if _reduced_count(x.shape, axes) < 2:
        raise GraphError(f"batchnorm: need at least 2 values per channel, got shape {x.shape}")
    return _channel_affine(_normalize(x, axes, eps), gamma, beta)


# ---------------------------------------------------------------- losses


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    data = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    return make_node(data, "logsumexp", (a,), _logsumexp_bwd, axis)


def _logsumexp_bwd(out, g, needs):
    (a,) = out.parents
    return (mul(g, exp(sub(a, out))),)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return make_node(e / e.sum(axis=axis, keepdims=True), "softmax", (a,), _softmax_bwd, axis)


def _softmax_bwd(out, g, needs):
    inner = sum(mul(g, out), axis=out.ctx, keepdims=True)
    return (mul(out, sub(g, inner)),)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise _shape_error("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise GraphError(f"softmax_cross_entropy: label out of range for {logits.shape[1]} classes")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    picked = z[np.arange(z.shape[0]), labels]
    data = np.asarray(np.mean(lse - picked), dtype=z.dtype)
    return make_node(data, "softmax_cross_entropy", (logits,), _xent_bwd, labels)


def _xent_bwd(out, g, needs):
    (logits,) = out.parents
    labels = out.ctx
    n, c = logits.shape
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return (scale(mul(g, sub(softmax(logits), Tensor(onehot))), 1.0 / n),)


# ---------------------------------------------------------------- sugar


def _install_operators() -> None:
    T = Tensor
    T.__add__ = lambda a, b: add(a, b)
    T.__radd__ = lambda a, b: add(b, a)
    T.__sub__ = lambda a, b: sub(a, b)
    T.__rsub__ = lambda a, b: sub(b, a)
    T.__mul__ = lambda a, b: mul(a, b)
    T.__rmul__ = lambda a, b: mul(b, a)
    T.__neg__ = lambda a: neg(a)
    T.__matmul__ = lambda a, b: matmul(a, b)
    T.__pow__ = lambda a, p: pow_const(a, p)
    T.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    T.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
    T.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)


_install_operators()


FORWARD_OPS = {
    "conv2d": conv2d,
    "batchnorm": batch_norm,
    "affine": affine,
    "relu": relu,
    "sigmoid": sigmoid,
    "mul": mul,
    "flatten": flatten,
    "softmax_cross_entropy": softmax_cross_entropy,
    "add": add,
    "scale": scale,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch one of the named primitive kinds; ``attrs`` are op hyperparameters."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise GraphError(f"unknown op kind {kind!r}; expected one of {sorted(FORWARD_OPS)}") from None
    return fn(*inputs, **attrs)

