"""Pure-numpy kernels: im2col GEMM convolution and reshape-based pooling.

Fallback backend used when the compiled extension is unavailable (or forced
via MTSV_KERNELS=numpy). Results agree with the compiled kernels up to
floating-point summation order.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _col_matrix(x, kernel, stride):
    """View x (B, Cin, T) as an im2col matrix of shape (B*Tout, Cin*K)."""
    b, cin, t = x.shape
    tout = (t - kernel) // stride + 1
    sb, sc, st = x.strides
    cols = as_strided(x, (b, tout, cin, kernel), (sb, st * stride, sc, st))
    return cols.reshape(b * tout, cin * kernel), tout


def conv1d_forward(x, w, stride):
    """Valid 1-D convolution. x: (B, Cin, T), w: (Cout, Cin, K) -> (B, Cout, Tout)."""
    b = x.shape[0]
    cout, cin, k = w.shape
    mat, tout = _col_matrix(x, k, stride)
    y = mat @ w.reshape(cout, cin * k).T
    return np.ascontiguousarray(y.reshape(b, tout, cout).transpose(0, 2, 1))


def conv1d_backward(x, w, gy, stride):
    """Gradients of conv1d_forward w.r.t. x and w.

    gy: (B, Cout, Tout). Returns (gx, gw) with the shapes of x and w.
    """
    b, cin, t = x.shape
    cout, _, k = w.shape
    tout = gy.shape[2]
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 1)).reshape(b * tout, cout)

    mat, _ = _col_matrix(x, k, stride)
    gw = (gy_mat.T @ mat).reshape(cout, cin, k)

    gcols = (gy_mat @ w.reshape(cout, cin * k)).reshape(b, tout, cin, k)
    gx = np.zeros_like(x)
    for kk in range(k):
        gx[:, :, kk : kk + stride * tout : stride] += gcols[:, :, :, kk].transpose(0, 2, 1)
    return gx, gw


def maxpool1d_forward(x, kernel):
    """Non-overlapping max pool. x: (B, C, T) with T divisible by kernel."""
    b, c, t = x.shape
    r = x.reshape(b, c, t // kernel, kernel)
    idx = r.argmax(axis=3)
    y = np.take_along_axis(r, idx[..., None], axis=3)[..., 0]
    return y, idx.astype(np.int64)


def maxpool1d_backward(gy, idx, kernel):
    """Scatter gy back to the argmax positions recorded by the forward pass."""
    b, c, tout = gy.shape
    gx = np.zeros((b, c, tout, kernel), dtype=gy.dtype)
    np.put_along_axis(gx, idx[..., None], gy[..., None], axis=3)
    return gx.reshape(b, c, tout * kernel)
