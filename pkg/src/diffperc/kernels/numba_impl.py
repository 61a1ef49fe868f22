"""Numba-compiled im2col / col2im. Same layout contract as numpy_impl."""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, sh, sw, oh, ow):
    b, c, ph, pw = xp.shape
    cols = np.empty((b * oh * ow, c * kh * kw), dtype=xp.dtype)
    for bi in range(b):
        for y in range(oh):
            for x in range(ow):
                row = (bi * oh + y) * ow + x
                col = 0
                for ci in range(c):
                    for i in range(kh):
                        base = xp[bi, ci, y * sh + i]
                        for j in range(kw):
                            cols[row, col] = base[x * sw + j]
                            col += 1
    return cols


@njit(cache=True)
def col2im(cols, b, c, ph, pw, kh, kw, sh, sw, oh, ow):
    gxp = np.zeros((b, c, ph, pw), dtype=cols.dtype)
    for bi in range(b):
        for y in range(oh):
            for x in range(ow):
                row = (bi * oh + y) * ow + x
                col = 0
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            gxp[bi, ci, y * sh + i, x * sw + j] += cols[row, col]
                            col += 1
    return gxp
