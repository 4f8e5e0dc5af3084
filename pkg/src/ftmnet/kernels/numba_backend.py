"""Numba-jitted implementations of the hot kernels.

Same contracts and column layout as numpy_backend; see that module for
the layout documentation. All loops are serial so results are
reproducible run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((n * ho * wo, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for oy in range(ho):
            iy0 = oy * stride - pad
            for ox in range(wo):
                ix0 = ox * stride - pad
                row = (b * ho + oy) * wo + ox
                col = 0
                for ci in range(c):
                    for ky in range(kh):
                        iy = iy0 + ky
                        inside_y = 0 <= iy < h
                        for kx in range(kw):
                            ix = ix0 + kx
                            if inside_y and 0 <= ix < w:
                                cols[row, col] = x[b, ci, iy, ix]
                            col += 1
    return cols


@njit(cache=True)
def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for oy in range(ho):
            iy0 = oy * stride - pad
            for ox in range(wo):
                ix0 = ox * stride - pad
                row = (b * ho + oy) * wo + ox
                col = 0
                for ci in range(c):
                    for ky in range(kh):
                        iy = iy0 + ky
                        inside_y = 0 <= iy < h
                        for kx in range(kw):
                            ix = ix0 + kx
                            if inside_y and 0 <= ix < w:
                                out[b, ci, iy, ix] += cols[row, col]
                            col += 1
    return out


@njit(cache=True)
def slic_assign(rgb, centers, spatial_scale, window, labels, dists):
    h, w = labels.shape
    s2 = spatial_scale * spatial_scale
    for k in range(centers.shape[0]):
        cy = centers[k, 3]
        cx = centers[k, 4]
        y0 = max(0, int(cy) - window)
        y1 = min(h, int(cy) + window + 1)
        x0 = max(0, int(cx) - window)
        x1 = min(w, int(cx) + window + 1)
        for y in range(y0, y1):
            dy = y - cy
            for x in range(x0, x1):
                dx = x - cx
                d2 = s2 * (dy * dy + dx * dx)
                for ch in range(3):
                    dc = rgb[y, x, ch] - centers[k, ch]
                    d2 += dc * dc
                if d2 < dists[y, x]:
                    dists[y, x] = d2
                    labels[y, x] = k
    return None


@njit(cache=True)
def slic_update(rgb, labels, k):
    h, w = labels.shape
    centers = np.zeros((k, 5), dtype=rgb.dtype)
    counts = np.zeros(k, dtype=rgb.dtype)
    for y in range(h):
        for x in range(w):
            lab = labels[y, x]
            counts[lab] += 1
            for ch in range(3):
                centers[lab, ch] += rgb[y, x, ch]
            centers[lab, 3] += y
            centers[lab, 4] += x
    for lab in range(k):
        if counts[lab] > 0:
            for j in range(5):
                centers[lab, j] /= counts[lab]
    return centers, counts
