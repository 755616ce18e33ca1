"""Array primitives for convolution and pooling (NCHW layout)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold ``x`` of shape (N, C, H, W) into patches.

    Returns an array of shape (N * out_h * out_w, C * kernel * kernel) whose
    columns are ordered (channel, kernel row, kernel col).
    """
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)


def col2im(cols: np.ndarray, shape: tuple, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to an image."""
    n, c, h, w = shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for ky in range(kernel):
        y_end = ky + stride * oh
        for kx in range(kernel):
            x_end = kx + stride * ow
            img[:, :, ky:y_end:stride, kx:x_end:stride] += cols[:, :, ky, kx]
    if padding:
        img = img[:, :, padding:-padding, padding:-padding]
    return img


def maxpool(x: np.ndarray, size: int):
    """Non-overlapping max pooling. Returns (pooled, argmax index within window)."""
    n, c, h, w = x.shape
    ph, pw = h // size, w // size
    x = x[:, :, : ph * size, : pw * size]
    win = x.reshape(n, c, ph, size, pw, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ph, pw, size * size)
    arg = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def maxpool_backward(grad: np.ndarray, arg: np.ndarray, shape: tuple, size: int) -> np.ndarray:
    n, c, h, w = shape
    ph, pw = arg.shape[2], arg.shape[3]
    win = np.zeros((n, c, ph, pw, size * size))
    np.put_along_axis(win, arg[..., None], grad[..., None], axis=-1)
    win = win.reshape(n, c, ph, pw, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ph * size, pw * size)
    out = np.zeros(shape)
    out[:, :, : ph * size, : pw * size] = win
    return out
