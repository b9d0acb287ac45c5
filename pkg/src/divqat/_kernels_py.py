"""Pure numpy implementations of the compiled kernels (import fallback)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, pad, stride):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # [n, c, oh, ow, kh, kw] -> [n, oh, ow, c, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, pad, stride):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    taps = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += taps[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def fake_quant_rows(x, scale, zero_point, qmin, qmax):
    s = scale[:, None]
    zp = zero_point[:, None]
    t = np.rint(x / s + zp)
    lo = x.dtype.type(qmin)
    hi = x.dtype.type(qmax)
    mask = ~((t < lo) | (t > hi))
    y = (np.clip(t, lo, hi) - zp) * s
    return y, mask.astype(np.uint8)
