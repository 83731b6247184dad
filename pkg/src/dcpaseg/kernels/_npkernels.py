"""Pure-numpy implementations of the hot layer kernels.

Every function takes and returns C-contiguous batched arrays in
``(N, C, H, W)`` layout. The dtype of the inputs is preserved (float32 in
training, float64 in gradient checks).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _im2col(x, k):
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d_forward(x, w, b):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    cols = _im2col(x, k)
    y = np.matmul(w.reshape(co, -1), cols)
    y += b[None, :, None]
    return y.reshape(n, co, ho, wo)


def conv2d_backward(x, w, dy, need_dx=True):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    cols = _im2col(x, k)
    dyf = dy.reshape(n, co, ho * wo)
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    if not need_dx:
        return None, dw.astype(w.dtype, copy=False), db.astype(w.dtype, copy=False)
    dcols = np.matmul(w.reshape(co, -1).T, dyf).reshape(n, c, k, k, ho, wo)
    dx = np.zeros_like(x)
    for ky in range(k):
        for kx in range(k):
            dx[:, :, ky:ky + ho, kx:kx + wo] += dcols[:, :, ky, kx]
    return dx, dw.astype(w.dtype, copy=False), db.astype(w.dtype, copy=False)


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.int8)  # first maximum wins ties
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(dy, idx):
    n, c, ho, wo = dy.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx).reshape(n, c, 2 * ho, 2 * wo)


def upconv2_forward(x, w, b):
    n, ci, h, wd = x.shape
    co = w.shape[1]
    t = np.matmul(w.reshape(ci, co * 4).T, x.reshape(n, ci, h * wd))
    y = t.reshape(n, co, 2, 2, h, wd).transpose(0, 1, 4, 2, 5, 3)
    y = np.ascontiguousarray(y).reshape(n, co, 2 * h, 2 * wd)
    y += b[None, :, None, None]
    return y


def upconv2_backward(x, w, dy):
    n, ci, h, wd = x.shape
    co = w.shape[1]
    dt = dy.reshape(n, co, h, 2, wd, 2).transpose(0, 1, 3, 5, 2, 4)
    dt = np.ascontiguousarray(dt).reshape(n, co * 4, h * wd)
    w2 = w.reshape(ci, co * 4)
    dx = np.matmul(w2, dt).reshape(x.shape)
    dw = np.matmul(x.reshape(n, ci, h * wd), dt.transpose(0, 2, 1)).sum(axis=0)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape).astype(w.dtype, copy=False), db.astype(w.dtype, copy=False)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(y, g):
    return np.where(y > 0, g, 0).astype(g.dtype, copy=False)
