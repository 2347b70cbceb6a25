"""Pure-numpy convolution kernels (fallback for the compiled extension).

Both implementations must agree bit for bit, so the accumulation order in
``col2im3x3`` (kernel tap outer, pixels inner) is part of the contract.
"""
import numpy as np


def im2col3x3(x):
    """Unfold a zero-padded 3x3 neighbourhood: (n, c, h, w) -> (n, c*9, h*w)."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:h + 1, 1:w + 1] = x
    cols = np.empty((n, c, 9, h, w), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(n, c * 9, h * w)


def col2im3x3(cols, h, w):
    """Adjoint of :func:`im2col3x3`: fold (n, c*9, h*w) back to (n, c, h, w)."""
    n = cols.shape[0]
    c = cols.shape[1] // 9
    cols = cols.reshape(n, c, 9, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            xp[:, :, ky:ky + h, kx:kx + w] += cols[:, :, ky * 3 + kx]
    return np.ascontiguousarray(xp[:, :, 1:h + 1, 1:w + 1])
