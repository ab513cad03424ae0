"""Forward kernels with exact vector-Jacobian products.

Image tensors are NHWC.  Convolution is cross-correlation.  SAME padding
splits the total pad as (floor, ceil) over the (leading, trailing) edges.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from akid.tensor import ShapeError, Tensor, as_tensor, record

SAME = "SAME"
VALID = "VALID"


def output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out, pad_lead, pad_trail)`` for one spatial axis."""
    if stride < 1 or k < 1:
        raise ShapeError(f"kernel and stride must be >= 1, got k={k} stride={stride}")
    padding = padding.upper()
    if padding == SAME:
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == VALID:
        if k > size:
            raise ShapeError(f"window {k} larger than input extent {size} with VALID padding")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _windows(xp, kh, kw, sh, sw, ho, wo):
    # [N, Ho, Wo, C, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::sh, ::sw][:, :ho, :wo]


def _check_rank(x: Tensor, rank: int, what: str):
    if x.data.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank} input, got shape {x.shape}")


def conv2d(x, kernel, bias, strides=(1, 1), padding=SAME) -> Tensor:
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_rank(x, 4, "conv2d")
    _check_rank(kernel, 4, "conv2d kernel")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channel axis (3) is {cin} but kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out channels {cout}")
    sh, sw = strides
    ho, ph0, ph1 = output_size(h, kh, sh, padding)
    wo, pw0, pw1 = output_size(w, kw, sw, padding)
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    cols = _windows(xp, kh, kw, sh, sw, ho, wo).transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, ph0:ph0 + h, pw0:pw0 + w, :]
        dk = (cols.T @ g2).reshape(kernel.shape)
        return dx, dk, g2.sum(axis=0)

    return record("conv2d", Tensor(out, dtype=x.dtype), (x, kernel, bias), vjp)


def maxpool2d(x, ksize=(2, 2), strides=(2, 2), padding=SAME, return_argmax=False):
    """Max pooling; padded cells are -inf and never win.  Ties go to the first cell in row-major window order."""
    x = as_tensor(x)
    _check_rank(x, 4, "maxpool2d")
    n, h, w, c = x.shape
    kh, kw = ksize
    sh, sw = strides
    ho, ph0, ph1 = output_size(h, kh, sh, padding)
    wo, pw0, pw1 = output_size(w, kw, sw, padding)
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n, ho, wo, c, kh * kw)
    argmax = win.argmax(axis=-1)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]

    def vjp(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                hit = argmax == i * kw + j
                dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += np.where(hit, g, 0)
        return (dxp[:, ph0:ph0 + h, pw0:pw0 + w, :],)

    y = record("maxpool2d", Tensor(out, dtype=x.dtype), (x,), vjp)
    return (y, argmax) if return_argmax else y


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", Tensor(np.where(mask, x.data, 0), dtype=x.dtype), (x,), lambda g: (g * mask,))


def maxout(x, group_size: int) -> Tensor:
    """Max over consecutive groups of ``group_size`` channels on the last axis."""
    x = as_tensor(x)
    c = x.shape[-1]
    if group_size < 1 or c % group_size:
        raise ValueError(f"maxout group_size {group_size} does not divide channel count {c}")
    grouped = x.data.reshape(x.shape[:-1] + (c // group_size, group_size))
    arg = grouped.argmax(axis=-1)
    out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros(grouped.shape, dtype=g.dtype)
        np.put_along_axis(dx, arg[..., None], g[..., None], axis=-1)
        return (dx.reshape(x.shape),)

    return record("maxout", Tensor(out, dtype=x.dtype), (x,), vjp)


def inner_product(x, weight, bias) -> Tensor:
    """``x @ W + b``; inputs of rank > 2 are flattened to [N, D] first."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    flat = x.data.reshape(x.shape[0], -1)
    d, k = weight.shape
    if flat.shape[1] != d:
        raise ShapeError(f"inner_product: flattened input has {flat.shape[1]} features (axis 1), weight expects {d}")
    if bias.shape != (k,):
        raise ShapeError(f"inner_product: bias shape {bias.shape} does not match {k} outputs")
    out = flat @ weight.data + bias.data

    def vjp(g):
        return (g @ weight.data.T).reshape(x.shape), flat.T @ g, g.sum(axis=0)

    return record("inner_product", Tensor(out, dtype=x.dtype), (x, weight, bias), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return record("reshape", Tensor(out, dtype=x.dtype), (x,), lambda g: (g.reshape(x.shape),))


def batch_norm(x, gamma, beta, epsilon=1e-5, mode="train", running_mean=None, running_var=None, momentum=0.99):
    """Per-channel (last axis) batch normalization.

    Returns ``(y, new_running_mean, new_running_var)``.  Train mode uses batch
    statistics (biased variance) and blends them into the running statistics
    as ``momentum * running + (1 - momentum) * batch``; inference mode uses
    the running statistics and returns them unchanged.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = tuple(range(x.data.ndim - 1))
    if running_mean is None:
        running_mean = np.zeros(c, dtype=x.dtype)
    if running_var is None:
        running_var = np.ones(c, dtype=x.dtype)

    if mode == "train":
        m = x.size // c
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + epsilon)
        xhat = (x.data - mean) * inv
        out = gamma.data * xhat + beta.data
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var

        def vjp(g):
            dxhat = g * gamma.data
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif mode == "inference":
        inv = 1.0 / np.sqrt(running_var + epsilon)
        xhat = (x.data - running_mean) * inv
        out = gamma.data * xhat + beta.data
        new_mean, new_var = running_mean, running_var

        def vjp(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    y = record("batch_norm", Tensor(out, dtype=x.dtype), (x, gamma, beta), vjp)
    return y, np.asarray(new_mean, dtype=x.dtype), np.asarray(new_var, dtype=x.dtype)


def dropout(x, keep_prob: float, mode="train", rng=None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/keep_prob at train time; inference is identity."""
    x = as_tensor(x)
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode == "inference" or keep_prob == 1:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.uniform(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return record("dropout", Tensor(x.data * mask, dtype=x.dtype), (x,), lambda g: (g * mask,))


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch.

    Returns ``(loss, predictions, accuracy)``; predictions break ties toward
    the lowest class index.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch axis 0 of size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])
    predictions = logits.data.argmax(axis=1)
    accuracy = float(np.mean(predictions == labels)) if n else 0.0

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    y = record("softmax_cross_entropy", Tensor(loss, dtype=logits.dtype), (logits,), vjp)
    return y, predictions, accuracy


def add(a, b) -> Tensor:
    """Elementwise sum of equal-shape tensors (residual merges, loss sums)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", Tensor(a.data + b.data, dtype=a.dtype), (a, b), lambda g: (g, g))


def l2_loss(w, scale: float) -> Tensor:
    """``scale * sum(w**2)``."""
    w = as_tensor(w)
    out = scale * np.sum(w.data * w.data)
    return record("l2_loss", Tensor(out, dtype=w.dtype), (w,), lambda g: (2 * scale * g * w.data,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return record("sum", Tensor(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def multiply_const(x, c) -> Tensor:
    """Elementwise product with a constant array (not differentiated)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    return record("multiply_const", Tensor(x.data * c, dtype=x.dtype), (x,), lambda g: (g * c,))

