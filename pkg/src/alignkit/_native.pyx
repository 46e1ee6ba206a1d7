# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampling kernels.

Hot loops only: bilinear gathers (clamped for warping, zero out-of-bounds
for deformable sampling). Arithmetic is carried out in the input precision
with the same expression tree as the numpy fallback in ``_pure``, so both
backends produce identical results. Compiled without -ffast-math on purpose.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double

ctypedef Py_ssize_t isize


cdef inline object _empty(isize n, real sample):
    if real is float:
        return np.empty(n, dtype=np.float32)
    else:
        return np.empty(n, dtype=np.float64)


def gather_bilinear_clamp(real[:, ::1] img_flat, isize H, isize W,
                          real[::1] xs, real[::1] ys, real[:, ::1] out):
    """Sample ``img_flat`` (C, H*W) at absolute coords, clamp-to-edge.

    xs/ys have length N; out is (C, N).
    """
    cdef isize C = img_flat.shape[0]
    cdef isize N = xs.shape[0]
    cdef isize i, c
    cdef real x, y, x0f, y0f, fx, fy
    cdef real one = <real>1.0
    cdef real hi_x = <real>(W - 1)
    cdef real hi_y = <real>(H - 1)
    cdef isize x0, y0, x1, y1

    i00_a = np.empty(N, dtype=np.intp)
    i01_a = np.empty(N, dtype=np.intp)
    i10_a = np.empty(N, dtype=np.intp)
    i11_a = np.empty(N, dtype=np.intp)
    w00_a = _empty(N, one)
    w01_a = _empty(N, one)
    w10_a = _empty(N, one)
    w11_a = _empty(N, one)
    cdef isize[::1] i00 = i00_a, i01 = i01_a, i10 = i10_a, i11 = i11_a
    cdef real[::1] w00 = w00_a, w01 = w01_a, w10 = w10_a, w11 = w11_a

    for i in range(N):
        x = xs[i]
        y = ys[i]
        if x < 0:
            x = 0
        if x > hi_x:
            x = hi_x
        if y < 0:
            y = 0
        if y > hi_y:
            y = hi_y
        x0f = <real>floor(x)
        y0f = <real>floor(y)
        x0 = <isize>x0f
        y0 = <isize>y0f
        x1 = x0 + 1
        if x1 > W - 1:
            x1 = W - 1
        y1 = y0 + 1
        if y1 > H - 1:
            y1 = H - 1
        fx = x - x0f
        fy = y - y0f
        w00[i] = (one - fy) * (one - fx)
        w01[i] = (one - fy) * fx
        w10[i] = fy * (one - fx)
        w11[i] = fy * fx
        i00[i] = y0 * W + x0
        i01[i] = y0 * W + x1
        i10[i] = y1 * W + x0
        i11[i] = y1 * W + x1

    for c in range(C):
        for i in range(N):
            out[c, i] = (img_flat[c, i00[i]] * w00[i] + img_flat[c, i01[i]] * w01[i]) \
                      + (img_flat[c, i10[i]] * w10[i] + img_flat[c, i11[i]] * w11[i])


def warp_gather(real[:, :, ::1] feature, real[:, :, ::1] flow, real[:, :, ::1] out):
    """Backward-warp: out[c,y,x] = bilinear(feature[c], (x+dx, y+dy)), clamped."""
    cdef isize C = feature.shape[0]
    cdef isize H = feature.shape[1]
    cdef isize W = feature.shape[2]
    cdef isize j, i, c
    cdef real x, y, x0f, y0f, fx, fy
    cdef real one = <real>1.0
    cdef real hi_x = <real>(W - 1)
    cdef real hi_y = <real>(H - 1)
    cdef isize x0, y0, x1, y1
    cdef isize N = H * W

    i00_a = np.empty(N, dtype=np.intp)
    i01_a = np.empty(N, dtype=np.intp)
    i10_a = np.empty(N, dtype=np.intp)
    i11_a = np.empty(N, dtype=np.intp)
    w00_a = _empty(N, one)
    w01_a = _empty(N, one)
    w10_a = _empty(N, one)
    w11_a = _empty(N, one)
    cdef isize[::1] i00 = i00_a, i01 = i01_a, i10 = i10_a, i11 = i11_a
    cdef real[::1] w00 = w00_a, w01 = w01_a, w10 = w10_a, w11 = w11_a
    cdef isize p = 0

    for j in range(H):
        for i in range(W):
            x = <real>i + flow[0, j, i]
            y = <real>j + flow[1, j, i]
            if x < 0:
                x = 0
            if x > hi_x:
                x = hi_x
            if y < 0:
                y = 0
            if y > hi_y:
                y = hi_y
            x0f = <real>floor(x)
            y0f = <real>floor(y)
            x0 = <isize>x0f
            y0 = <isize>y0f
            x1 = x0 + 1
            if x1 > W - 1:
                x1 = W - 1
            y1 = y0 + 1
            if y1 > H - 1:
                y1 = H - 1
            fx = x - x0f
            fy = y - y0f
            w00[p] = (one - fy) * (one - fx)
            w01[p] = (one - fy) * fx
            w10[p] = fy * (one - fx)
            w11[p] = fy * fx
            i00[p] = y0 * W + x0
            i01[p] = y0 * W + x1
            i10[p] = y1 * W + x0
            i11[p] = y1 * W + x1
            p += 1

    cdef real[:, ::1] ff = <real[:C, :N:1]>&feature[0, 0, 0]
    cdef real[:, ::1] of = <real[:C, :N:1]>&out[0, 0, 0]
    for c in range(C):
        for p in range(N):
            of[c, p] = (ff[c, i00[p]] * w00[p] + ff[c, i01[p]] * w01[p]) \
                     + (ff[c, i10[p]] * w10[p] + ff[c, i11[p]] * w11[p])


def deform_im2col(real[:, :, ::1] feature, real[:, :, :, :, ::1] pattern,
                  real[:, :, :, ::1] mask, real[:, ::1] cols):
    """Modulated deformable im2col (DCNv2 forward building block).

    feature (C,H,W); pattern (n,2,9,H,W) absolute per-tap sampling pattern
    (row 0 vertical, row 1 horizontal); mask (n,9,H,W). Fills cols
    (C*9, H*W) with rows ordered c*9+k, zero out-of-bounds sampling.
    Channel c belongs to offset group c // (C // n).
    """
    cdef isize C = feature.shape[0]
    cdef isize H = feature.shape[1]
    cdef isize W = feature.shape[2]
    cdef isize n = pattern.shape[0]
    cdef isize per = C // n
    cdef isize N = H * W
    cdef isize g, k, j, i, c, p
    cdef real sx, sy, x0f, y0f, fx, fy, v00, v01, v10, v11, val
    cdef real one = <real>1.0
    cdef real zero = <real>0.0
    cdef isize x0, y0, x1, y1

    i0_a = np.empty(N, dtype=np.intp)
    i1_a = np.empty(N, dtype=np.intp)
    j0_a = np.empty(N, dtype=np.intp)
    j1_a = np.empty(N, dtype=np.intp)
    w00_a = _empty(N, one)
    w01_a = _empty(N, one)
    w10_a = _empty(N, one)
    w11_a = _empty(N, one)
    cdef isize[::1] xi0 = i0_a, xi1 = i1_a, yi0 = j0_a, yi1 = j1_a
    cdef real[::1] w00 = w00_a, w01 = w01_a, w10 = w10_a, w11 = w11_a
    cdef real[:, ::1] ff = <real[:C, :N:1]>&feature[0, 0, 0]

    for g in range(n):
        for k in range(9):
            p = 0
            for j in range(H):
                for i in range(W):
                    sy = <real>j + pattern[g, 0, k, j, i]
                    sx = <real>i + pattern[g, 1, k, j, i]
                    # floor() yields an integral value, so the int cast is exact
                    # even for negatives.
                    x0f = <real>floor(sx)
                    y0f = <real>floor(sy)
                    x0 = <isize>x0f
                    y0 = <isize>y0f
                    fx = sx - x0f
                    fy = sy - y0f
                    w00[p] = (one - fy) * (one - fx)
                    w01[p] = (one - fy) * fx
                    w10[p] = fy * (one - fx)
                    w11[p] = fy * fx
                    xi0[p] = x0
                    xi1[p] = x0 + 1
                    yi0[p] = y0
                    yi1[p] = y0 + 1
                    p += 1
            for c in range(g * per, (g + 1) * per):
                p = 0
                for j in range(H):
                    for i in range(W):
                        x0 = xi0[p]
                        x1 = xi1[p]
                        y0 = yi0[p]
                        y1 = yi1[p]
                        v00 = ff[c, y0 * W + x0] if (0 <= y0 < H and 0 <= x0 < W) else zero
                        v01 = ff[c, y0 * W + x1] if (0 <= y0 < H and 0 <= x1 < W) else zero
                        v10 = ff[c, y1 * W + x0] if (0 <= y1 < H and 0 <= x0 < W) else zero
                        v11 = ff[c, y1 * W + x1] if (0 <= y1 < H and 0 <= x1 < W) else zero
                        val = (v00 * w00[p] + v01 * w01[p]) + (v10 * w10[p] + v11 * w11[p])
                        cols[c * 9 + k, p] = mask[g, k, j, i] * val
                        p += 1
