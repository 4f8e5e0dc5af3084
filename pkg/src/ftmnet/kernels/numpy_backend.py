"""Pure-numpy implementations of the hot kernels.

These are the fallback path when numba is unavailable (or disabled via
FTMNET_KERNELS=numpy). The convolution kernels use the im2col/col2im
layout: patches are unrolled to a matrix so the surrounding code can do
the heavy lifting with one BLAS matmul.

Column layout: cols[row, col] with row = (n*HO + oy)*WO + ox and
col = (c*KH + ky)*KW + kx.
"""

import numpy as np


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unroll [N,C,H,W] into [N*HO*WO, C*KH*KW] patch rows."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [n, c, ho, wo, kh, kw]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray,
    n: int,
    c: int,
    h: int,
    w: int,
    kh: int,
    kw: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Scatter-add [N*HO*WO, C*KH*KW] rows back onto an [N,C,H,W] grid.

    Adjoint of im2col: overlapping patch positions accumulate.
    """
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    # k*k strided adds instead of one np.add.at: far fewer, fully vectorized
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride] += blocks[
                :, :, ky, kx
            ]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def slic_assign(
    rgb: np.ndarray,
    centers: np.ndarray,
    spatial_scale: float,
    window: int,
    labels: np.ndarray,
    dists: np.ndarray,
) -> None:
    """One SLIC assignment sweep.

    centers rows are (r, g, b, y, x); each cluster claims pixels within a
    +-window box around its spatial center when its scaled 5-d distance
    beats the incumbent in `dists`. Clusters are visited in index order
    with strict improvement, so ties resolve to the lowest cluster id.
    """
    h, w = labels.shape
    s2 = spatial_scale * spatial_scale
    for k in range(centers.shape[0]):
        cy, cx = centers[k, 3], centers[k, 4]
        y0 = max(0, int(cy) - window)
        y1 = min(h, int(cy) + window + 1)
        x0 = max(0, int(cx) - window)
        x1 = min(w, int(cx) + window + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        patch = rgb[y0:y1, x0:x1, :]
        dc = patch - centers[k, :3]
        d2 = np.einsum("ijk,ijk->ij", dc, dc)
        yy = np.arange(y0, y1, dtype=rgb.dtype)[:, None] - cy
        xx = np.arange(x0, x1, dtype=rgb.dtype)[None, :] - cx
        d2 = d2 + s2 * (yy * yy + xx * xx)
        sub = dists[y0:y1, x0:x1]
        better = d2 < sub
        sub[better] = d2[better]
        labels[y0:y1, x0:x1][better] = k
    return None


def slic_update(rgb: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Recompute cluster means (r,g,b,y,x) from the current assignment."""
    h, w = labels.shape
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(rgb.dtype)
    centers = np.zeros((k, 5), dtype=rgb.dtype)
    for ch in range(3):
        centers[:, ch] = np.bincount(flat, weights=rgb[:, :, ch].ravel(), minlength=k)
    yy, xx = np.mgrid[0:h, 0:w]
    centers[:, 3] = np.bincount(flat, weights=yy.ravel().astype(rgb.dtype), minlength=k)
    centers[:, 4] = np.bincount(flat, weights=xx.ravel().astype(rgb.dtype), minlength=k)
    nz = counts > 0
    centers[nz] /= counts[nz, None]
    return centers, counts
