"""NHWC convolution, per-cell dense head and activations with manual gradients."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size, kernel, stride):
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x, kernel, stride):
    """(N, H, W, C) -> ((N*Ho*Wo), C*k*k) patch matrix, zero padded by ``k // 2``."""
    pad = kernel // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    # win is (N, Ho, Wo, C, k, k); rows match a (out, in, kh, kw) weight reshaped to (out, -1)
    return np.ascontiguousarray(win).reshape(n * ho * wo, -1), (n, ho, wo)


def col2im(dcols, x_shape, kernel, stride, out_hw):
    n, h, w, c = x_shape
    ho, wo = out_hw
    pad = kernel // 2
    dcols = dcols.reshape(n, ho, wo, c, kernel, kernel)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
    return dxp[:, pad:pad + h, pad:pad + w, :]


def conv_forward(x, weight, bias, stride):
    kernel = weight.shape[2]
    cols, (n, ho, wo) = im2col(x, kernel, stride)
    wmat = weight.reshape(weight.shape[0], -1)
    out = cols @ wmat.T + bias
    return out.reshape(n, ho, wo, -1), (cols, x.shape, (ho, wo))


def conv_backward(dout, weight, cache, stride, need_dx=True):
    cols, x_shape, out_hw = cache
    kernel = weight.shape[2]
    d2 = dout.reshape(-1, weight.shape[0])
    dw = (d2.T @ cols).reshape(weight.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = d2 @ weight.reshape(weight.shape[0], -1)
        dx = col2im(dcols, x_shape, kernel, stride, out_hw)
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def avg_pool(x, factor):
    if factor == 1:
        return x
    n, h, w, c = x.shape
    return x.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def avg_pool_backward(dout, factor):
    if factor == 1:
        return dout
    g = np.repeat(np.repeat(dout, factor, axis=1), factor, axis=2)
    return g / (factor * factor)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
