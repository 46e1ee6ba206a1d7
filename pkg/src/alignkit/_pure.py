"""Pure-numpy fallback for the compiled sampling kernels.

Vectorized equivalents of the Cython routines in ``_native``. The expression
trees mirror the compiled code operation for operation (same float32 ops in
the same order), so the two backends agree exactly, not just to tolerance.
"""

import numpy as np


def _corner_weights(x, y, H, W):
    """Clamped corner indices + bilinear weights for absolute coords."""
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0f = np.floor(x)
    y0f = np.floor(y)
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0f
    fy = y - y0f
    one = x.dtype.type(1)
    w00 = (one - fy) * (one - fx)
    w01 = (one - fy) * fx
    w10 = fy * (one - fx)
    w11 = fy * fx
    return (y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1), (w00, w01, w10, w11)


def gather_bilinear_clamp(img_flat, H, W, xs, ys, out):
    (i00, i01, i10, i11), (w00, w01, w10, w11) = _corner_weights(xs, ys, H, W)
    v = img_flat
    np.add(v[:, i00] * w00 + v[:, i01] * w01, v[:, i10] * w10 + v[:, i11] * w11, out=out)
    return out


def warp_gather(feature, flow, out):
    C, H, W = feature.shape
    dt = feature.dtype
    xs = np.broadcast_to(np.arange(W, dtype=dt)[None, :], (H, W)) + flow[0]
    ys = np.broadcast_to(np.arange(H, dtype=dt)[:, None], (H, W)) + flow[1]
    gather_bilinear_clamp(feature.reshape(C, -1), H, W,
                          xs.ravel(), ys.ravel(), out.reshape(C, -1))
    return out


def deform_im2col(feature, pattern, mask, cols):
    C, H, W = feature.shape
    n = pattern.shape[0]
    per = C // n
    dt = feature.dtype
    base_x = np.arange(W, dtype=dt)[None, :]
    base_y = np.arange(H, dtype=dt)[:, None]
    flat = feature.reshape(C, -1)
    one = dt.type(1)
    for g in range(n):
        for k in range(9):
            sy = (base_y + pattern[g, 0, k]).ravel()
            sx = (base_x + pattern[g, 1, k]).ravel()
            x0f = np.floor(sx)
            y0f = np.floor(sy)
            x0 = x0f.astype(np.intp)
            y0 = y0f.astype(np.intp)
            x1 = x0 + 1
            y1 = y0 + 1
            fx = sx - x0f
            fy = sy - y0f
            w00 = (one - fy) * (one - fx)
            w01 = (one - fy) * fx
            w10 = fy * (one - fx)
            w11 = fy * fx
            xv0 = (x0 >= 0) & (x0 < W)
            xv1 = (x1 >= 0) & (x1 < W)
            yv0 = (y0 >= 0) & (y0 < H)
            yv1 = (y1 >= 0) & (y1 < H)
            # clip for safe indexing; invalid corners are zeroed below
            x0c = np.clip(x0, 0, W - 1)
            x1c = np.clip(x1, 0, W - 1)
            y0c = np.clip(y0, 0, H - 1)
            y1c = np.clip(y1, 0, H - 1)
            i00 = y0c * W + x0c
            i01 = y0c * W + x1c
            i10 = y1c * W + x0c
            i11 = y1c * W + x1c
            m00 = yv0 & xv0
            m01 = yv0 & xv1
            m10 = yv1 & xv0
            m11 = yv1 & xv1
            mk = mask[g, k].ravel()
            zero = dt.type(0)
            for c in range(g * per, (g + 1) * per):
                v = flat[c]
                v00 = np.where(m00, v[i00], zero)
                v01 = np.where(m01, v[i01], zero)
                v10 = np.where(m10, v[i10], zero)
                v11 = np.where(m11, v[i11], zero)
                val = (v00 * w00 + v01 * w01) + (v10 * w10 + v11 * w11)
                cols[c * 9 + k] = mk * val
    return cols
