"""Pure-numpy conv lowering kernels.

Fallback implementations of im2col / col2im used when the compiled
extension is unavailable. Both backends implement the same contract:
zero padding, square stride, float64 in and out, and per-element
accumulation in ascending (ki, kj) kernel-offset order so the two
backends agree to the last bit on identical inputs.
"""

import numpy as np


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Lower (B, C, H, W) into patch rows of shape (B*OH*OW, C*kh*kw)."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"im2col: kernel {kh}x{kw} with stride {stride} pad {pad} "
            f"does not fit input {h}x{w}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride,
                                    kj : kj + stride * ow : stride]
    out = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(out)


def col2im(cols: np.ndarray, b: int, c: int, h: int, w: int,
           kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch rows back onto (B, C, H, W)."""
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if cols.shape != (b * oh * ow, c * kh * kw):
        raise ValueError(
            f"col2im: expected cols of shape {(b * oh * ow, c * kh * kw)}, "
            f"got {cols.shape}"
        )
    cols6 = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, :, ki : ki + stride * oh : stride,
               kj : kj + stride * ow : stride] += cols6[:, :, ki, kj]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp
