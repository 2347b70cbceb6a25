# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3x3 unfold/fold kernels with the zero padding fused in."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3x3(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.zeros((n, c * 9, h * w), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, ky, kx, y, xx, sy, sx, row
    for b in range(n):
        for ch in range(c):
            for ky in range(3):
                for kx in range(3):
                    row = ch * 9 + ky * 3 + kx
                    for y in range(h):
                        sy = y + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for xx in range(w):
                            sx = xx + kx - 1
                            if 0 <= sx < w:
                                cols[b, row, y * w + xx] = x[b, ch, sy, sx]
    return out


def col2im3x3(cols_in, Py_ssize_t h, Py_ssize_t w):
    cdef const double[:, :, ::1] cols = np.ascontiguousarray(cols_in, dtype=np.float64)
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1] // 9
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, ky, kx, y, xx, sy, sx, row
    # tap-major order keeps summation identical to the numpy fallback
    for ky in range(3):
        for kx in range(3):
            for b in range(n):
                for ch in range(c):
                    row = ch * 9 + ky * 3 + kx
                    for y in range(h):
                        sy = y + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for xx in range(w):
                            sx = xx + kx - 1
                            if 0 <= sx < w:
                                dx[b, ch, sy, sx] += cols[b, row, y * w + xx]
    return out
