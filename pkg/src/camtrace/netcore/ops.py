"""Differentiable operations over Tensors.

Elementwise ops broadcast like numpy; their backwards sum gradients over the
broadcast axes. Convolution and pooling use strided im2col windows; their
backwards scatter back with the matching col2im loops.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeMismatch
from .tensor import Tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate(g * out_data)

    return Tensor._result(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a.accumulate(g / a.data)

    return Tensor._result(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0)

    def backward(g):
        a.accumulate(g * mask)

    return Tensor._result(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backward)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return Tensor._result(out_data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False))

    return Tensor._result(out_data, (a,), backward)


# ------------------------------------------------------------ shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a.accumulate(g.reshape(a.shape))

    return Tensor._result(out_data, (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate(piece)

    return Tensor._result(out_data, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Tensor._result(out_data, (a, b), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weights)
    if bias is not None:
        out = add(out, bias)
    return out


# ------------------------------------------------------------- convolutions


def _out_dim(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Strided (N, C, Ho, Wo, kh, kw) view over a padded NCHW array."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (Co, Ci, kh, kw) kernels."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    n, ci, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ck != ci:
        raise ShapeMismatch(f"conv2d: {ci} input channels vs kernel expecting {ck}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatch(f"conv2d: {h}x{w} too small for {kh}x{kw} at padding {padding}")
    ho = _out_dim(h, kh, stride, padding)
    wo = _out_dim(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = (
        _windows(xp, kh, kw, stride)
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(n * ho * wo, ci * kh * kw)
    )
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        if bias is not None and bias.requires_grad:
            bias.accumulate(gmat.sum(axis=0).reshape(bias.shape))
        if kernel.requires_grad:
            kernel.accumulate((gmat.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, ci, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                ilim = i + stride * ho
                for j in range(kw):
                    dxp[:, :, i:ilim:stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x.accumulate(dxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out_data, parents, backward)


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h + 2 * padding < window or w + 2 * padding < window:
        raise ShapeMismatch(f"maxpool2d: {h}x{w} smaller than window {window}")
    ho = _out_dim(h, window, stride, padding)
    wo = _out_dim(w, window, stride, padding)
    # pad with -inf so padded cells never win the max
    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    view = _windows(xp, window, window, stride).reshape(n, c, ho, wo, window * window)
    arg = view.argmax(axis=-1)
    out_data = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros_like(xp)
        ni, ci_, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + arg // window
        cols_ = wi * stride + arg % window
        np.add.at(dxp, (ni, ci_, rows, cols_), g)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        x.accumulate(dxp)

    return Tensor._result(out_data, (x,), backward)


def avgpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"avgpool2d: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeMismatch(f"avgpool2d: {h}x{w} smaller than window {window}")
    ho = _out_dim(h, window, stride, 0)
    wo = _out_dim(w, window, stride, 0)
    view = _windows(x.data, window, window, stride)
    out_data = view.mean(axis=(4, 5))

    def backward(g):
        dx = np.zeros_like(x.data)
        share = g / (window * window)
        for i in range(window):
            for j in range(window):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        x.accumulate(dx)

    return Tensor._result(out_data, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial axes."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: expected NCHW, got {x.shape}")
    return mean(x, axis=(2, 3))


# ----------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    Training mode normalizes by batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"batch_norm: expected NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm: params sized {gamma.shape} for {c} channels")
    axes = (0, 2, 3)
    view = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # population variance
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean
        var = running_var
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(view)) * istd.reshape(view)
    out_data = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gi = gamma.data.reshape(view) * istd.reshape(view)
            if training:
                gsum = g.sum(axis=axes, keepdims=True)
                gx = (g * xhat).sum(axis=axes, keepdims=True)
                x.accumulate(gi * (g - gsum / m - xhat * gx / m))
            else:
                x.accumulate(gi * g)

    return Tensor._result(out_data, (x, gamma, beta), backward)


# ------------------------------------------------------------------ heads


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (x,), backward)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer class targets.

    The combined backward is the closed form (softmax - onehot), scaled by
    the reduction.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy: expected (N, K) logits, got {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: {n} rows vs {targets.shape} targets")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError("target class out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), targets]
    out_data = nll.mean() if reduction == "mean" else nll.sum()

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), targets] -= 1.0
        scale = g / n if reduction == "mean" else g
        logits.accumulate(probs * scale)

    return Tensor._result(np.asarray(out_data, dtype=logits.dtype), (logits,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-rate), identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        # bit-identity in eval mode

        def backward_eval(g):
            x.accumulate(g)

        return Tensor._result(x.data, (x,), backward_eval)
    if rng is None:
        raise ValueError("train-mode dropout requires an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out_data = x.data * keep * scale

    def backward(g):
        x.accumulate(g * keep * scale)

    return Tensor._result(out_data, (x,), backward)
