"""Pure numpy implementations of the convolution and pooling kernels.

These are the reference versions. ``_ckernels`` (Cython) implements the same
functions with identical summation order, so both backends agree bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N, C, H, W]`` into ``cols[N, C*kh*kw, Ho*Wo]``.

    Row ``c*kh*kw + i*kw + j`` of the result holds input pixel
    ``(c, oh*stride + i - pad, ow*stride + j - pad)`` for every output
    position ``oh*Wo + ow``.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k):
    """Non-overlapping ``k x k`` max pooling; trailing rows/cols are dropped.

    Returns the pooled array and the flat in-window index of the first
    maximum, which the backward pass routes the gradient to.
    """
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(grad, idx, x_shape, k):
    n, c, h, w = x_shape
    ho, wo = grad.shape[2], grad.shape[3]
    win = np.zeros((n, c, ho, wo, k * k))
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros((n, c, h, w))
    out[:, :, :ho * k, :wo * k] = win.reshape(n, c, ho * k, wo * k)
    return out
