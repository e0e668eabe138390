"""Layer primitives with hand-written backward passes.

Tensors are plain numpy arrays in ``(N, C, H, W)`` (2-D) or ``(N, C, L)``
(1-D) layout. Convolutions use the cross-correlation convention.
"""

from __future__ import annotations

import numpy as np

# im2col chunks are capped near this many elements to bound memory
_COLS_BUDGET = 8_000_000


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# 2-D convolution


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """``(N, C, Ho, Wo, kh, kw)`` strided view of an already padded input."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw]


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, Ho: int, Wo: int) -> np.ndarray:
    """``(N, C*kh*kw, Ho*Wo)`` patch matrix built from one strided slice per kernel offset."""
    N, C = xp.shape[:2]
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]
    return cols.reshape(N, C * kh * kw, Ho * Wo)


def _col2im(dcols: np.ndarray, dxp: np.ndarray, kh: int, kw: int, sh: int, sw: int, Ho: int, Wo: int) -> None:
    """Scatter-add a ``(N, C*kh*kw, Ho*Wo)`` patch gradient into padded ``dxp`` in place."""
    N, C = dxp.shape[:2]
    d = dcols.reshape(N, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += d[:, :, i, j]


def _chunk(n_per_sample: int) -> int:
    return max(1, _COLS_BUDGET // max(1, n_per_sample))


def conv2d_forward(x, kernels, bias, stride=1, pad=0):
    """``y[n,o] = sum_c x_pad[n,c] (*) k[o,c] + b[o]``; output ``floor((H+2p-kh)/s)+1``."""
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if ph < 0 or pw < 0:
        raise ShapeError("conv2d: negative padding")
    N, C, H, W = x.shape
    O, _, kh, kw = kernels.shape
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    kmat = kernels.reshape(O, -1)
    y = np.empty((N, O, Ho * Wo), dtype=np.result_type(x, kernels))
    step = _chunk(C * kh * kw * Ho * Wo)
    for n0 in range(0, N, step):
        y[n0 : n0 + step] = np.matmul(kmat, _im2col(xp[n0 : n0 + step], kh, kw, sh, sw, Ho, Wo))
    y += bias.reshape(1, -1, 1)
    return y.reshape(N, O, Ho, Wo)


def conv2d_backward(dy, x, kernels, stride=1, pad=0, need_dx=True):
    """Gradients ``(dx, dkernels, dbias)`` of :func:`conv2d_forward` given upstream ``dy``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    N, C, H, W = x.shape
    O, _, kh, kw = kernels.shape
    Ho, Wo = dy.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    db = dy.sum(axis=(0, 2, 3))
    kmat = kernels.reshape(O, -1)
    dk = np.zeros_like(kmat)
    dyr = dy.reshape(N, O, Ho * Wo)
    dxp = np.zeros(xp.shape, dtype=dy.dtype) if need_dx else None
    step = _chunk(C * kh * kw * Ho * Wo)
    for n0 in range(0, N, step):
        cols = _im2col(xp[n0 : n0 + step], kh, kw, sh, sw, Ho, Wo)
        for n in range(cols.shape[0]):
            dk += dyr[n0 + n] @ cols[n].T
        if need_dx:
            _col2im(np.matmul(kmat.T, dyr[n0 : n0 + step]), dxp[n0 : n0 + step], kh, kw, sh, sw, Ho, Wo)
    dx = dxp[:, :, ph : ph + H, pw : pw + W] if need_dx else None
    return dx, dk.reshape(kernels.shape), db


# ---------------------------------------------------------------------------
# 1-D convolution (as 2-D with unit height)


def conv1d_forward(x, kernels, bias, stride=1, pad=0):
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape} / kernels {kernels.shape} must be 3-D")
    y = conv2d_forward(x[:, :, None, :], kernels[:, :, None, :], bias, (1, stride), (0, pad))
    return y[:, :, 0, :]


def conv1d_backward(dy, x, kernels, stride=1, pad=0, need_dx=True):
    dx, dk, db = conv2d_backward(
        dy[:, :, None, :], x[:, :, None, :], kernels[:, :, None, :], (1, stride), (0, pad), need_dx
    )
    return (None if dx is None else dx[:, :, 0, :]), dk[:, :, 0, :], db


# ---------------------------------------------------------------------------
# pooling


def maxpool2d_forward(x, kh, kw, stride):
    """Max over ``kh x kw`` windows; returns ``(y, argmax)`` with first-in-scan-order ties."""
    N, C, H, W = x.shape
    if H < kh or W < kw:
        raise ShapeError(f"maxpool: window {kh}x{kw} larger than input {H}x{W}")
    sh, sw = _pair(stride)
    win = _windows(x, kh, kw, sh, sw)
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, Ho, Wo, kh * kw)
    arg = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2d_backward(dy, arg, x_shape, kh, kw, stride):
    N, C, H, W = x_shape
    sh, sw = _pair(stride)
    Ho, Wo = arg.shape[2], arg.shape[3]
    di, dj = np.divmod(arg, kw)
    rows = np.arange(Ho)[None, None, :, None] * sh + di
    cols = np.arange(Wo)[None, None, None, :] * sw + dj
    base = (np.arange(N)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * (H * W)
    idx = (base + rows * W + cols).ravel()
    dx = np.bincount(idx, weights=dy.ravel().astype(np.float64), minlength=N * C * H * W)
    return dx.reshape(x_shape).astype(dy.dtype)


def global_avg_pool_forward(x):
    """Mean over every axis after the channel axis: ``(N, C, ...) -> (N, C)``."""
    return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)


def global_avg_pool_backward(dy, x_shape):
    spatial = int(np.prod(x_shape[2:]))
    g = dy / spatial
    return np.broadcast_to(g.reshape(g.shape + (1,) * (len(x_shape) - 2)), x_shape).copy()


# ---------------------------------------------------------------------------
# dense / activations / loss


def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(dy, x, W):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    N = logits.shape[0]
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logz - z[np.arange(N), labels]))
    p = np.exp(z - logz[:, None])
    p[np.arange(N), labels] -= 1.0
    return loss, (p / N).astype(logits.dtype)
