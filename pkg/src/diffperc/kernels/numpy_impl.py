"""Pure-numpy im2col / col2im, vectorized over everything but the kernel window."""

import numpy as np


def im2col(xp, kh, kw, sh, sw, oh, ow):
    """Unfold a padded NCHW batch into a (B*OH*OW, C*KH*KW) matrix.

    Column ordering is (channel, kernel row, kernel col) to match
    ``weight.reshape(out_channels, -1)``.
    """
    b, c, _, _ = xp.shape
    cols = np.empty((b, oh, ow, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * oh * ow, c * kh * kw)


def col2im(cols, b, c, ph, pw, kh, kw, sh, sw, oh, ow):
    """Fold column gradients back onto the padded input, accumulating overlaps."""
    gxp = np.zeros((b, c, ph, pw), dtype=cols.dtype)
    cols6 = cols.reshape(b, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols6[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return gxp
