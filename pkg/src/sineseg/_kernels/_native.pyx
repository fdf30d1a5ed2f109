# cython: language_level=3
"""Compiled hot kernels: conv3d patch gather/scatter and the state-space scan.

Mirrors the contract of `_numpy_ref` exactly; see that module for the
layout documentation.  Loops release the GIL and run over C-contiguous
float32/float64 memoryviews.
"""

import numpy as np

BACKEND = "native"

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t p, Py_ssize_t s) noexcept nogil:
    # smallest output index whose input tap k - p is in bounds
    if k >= p:
        return 0
    return (p - k + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t k, Py_ssize_t p, Py_ssize_t s,
                           Py_ssize_t n, Py_ssize_t no) noexcept nogil:
    # one past the largest in-bounds output index, clamped to no
    cdef Py_ssize_t last = (n - 1 - k + p) // s
    if last + 1 < no:
        return last + 1
    return no


def unfold(real[:, :, :, ::1] x, kernel, stride, pad):
    cdef Py_ssize_t c = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pd = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t do = (d + 2 * pd - kd) // sd + 1
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c * kd * kh * kw, do * ho * wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, iz, iy, ix, zo, yo, xo, zi, yi, row, col, base
    cdef Py_ssize_t zlo, zhi, ylo, yhi, xlo, xhi
    cdef const real* src
    cdef real* dst
    with nogil:
        for ci in range(c):
            for iz in range(kd):
                zlo = _lo(iz, pd, sd); zhi = _hi(iz, pd, sd, d, do)
                for iy in range(kh):
                    ylo = _lo(iy, ph, sh); yhi = _hi(iy, ph, sh, h, ho)
                    for ix in range(kw):
                        xlo = _lo(ix, pw, sw); xhi = _hi(ix, pw, sw, w, wo)
                        row = ((ci * kd + iz) * kh + iy) * kw + ix
                        for zo in range(zlo, zhi):
                            zi = zo * sd + iz - pd
                            for yo in range(ylo, yhi):
                                yi = yo * sh + iy - ph
                                col = (zo * ho + yo) * wo
                                src = &x[ci, zi, yi, xlo * sw + ix - pw]
                                dst = &cols[row, col + xlo]
                                if sw == 1:
                                    for xo in range(xhi - xlo):
                                        dst[xo] = src[xo]
                                else:
                                    for xo in range(xhi - xlo):
                                        dst[xo] = src[xo * sw]
    return out


def fold_add(real[:, ::1] cols, x_shape, kernel, stride, pad):
    cdef Py_ssize_t c = x_shape[0], d = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pd = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t do = (d + 2 * pd - kd) // sd + 1
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c, d, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] xg = out
    cdef Py_ssize_t ci, iz, iy, ix, zo, yo, xo, zi, yi, row, col
    cdef Py_ssize_t zlo, zhi, ylo, yhi, xlo, xhi
    cdef const real* src
    cdef real* dst
    with nogil:
        for ci in range(c):
            for iz in range(kd):
                zlo = _lo(iz, pd, sd); zhi = _hi(iz, pd, sd, d, do)
                for iy in range(kh):
                    ylo = _lo(iy, ph, sh); yhi = _hi(iy, ph, sh, h, ho)
                    for ix in range(kw):
                        xlo = _lo(ix, pw, sw); xhi = _hi(ix, pw, sw, w, wo)
                        row = ((ci * kd + iz) * kh + iy) * kw + ix
                        for zo in range(zlo, zhi):
                            zi = zo * sd + iz - pd
                            for yo in range(ylo, yhi):
                                yi = yo * sh + iy - ph
                                col = (zo * ho + yo) * wo
                                src = &cols[row, col + xlo]
                                dst = &xg[ci, zi, yi, xlo * sw + ix - pw]
                                if sw == 1:
                                    for xo in range(xhi - xlo):
                                        dst[xo] += src[xo]
                                else:
                                    for xo in range(xhi - xlo):
                                        dst[xo * sw] += src[xo]
    return out


def ssm_scan(real[:, ::1] x, double[::1] lam, double[::1] beta):
    cdef Py_ssize_t c = x.shape[0], t = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((c, t), dtype=dtype)
    cdef real[:, ::1] h = out
    cdef Py_ssize_t ci, ti
    cdef double acc, l, b
    with nogil:
        for ci in range(c):
            l = lam[ci]
            b = beta[ci]
            acc = 0.0
            for ti in range(t):
                acc = l * acc + b * x[ci, ti]
                h[ci, ti] = <real> acc
    return out


def ssm_scan_grad(real[:, ::1] grad_h, real[:, ::1] x, real[:, ::1] h,
                  double[::1] lam, double[::1] beta):
    cdef Py_ssize_t c = grad_h.shape[0], t = grad_h.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((c, t), dtype=dtype)
    gl_arr = np.zeros(c, dtype=np.float64)
    gb_arr = np.zeros(c, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gl = gl_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t ci, ti
    cdef double a, l, b, gls, gbs
    with nogil:
        for ci in range(c):
            l = lam[ci]
            b = beta[ci]
            a = 0.0
            gls = 0.0
            gbs = 0.0
            for ti in range(t - 1, -1, -1):
                a = grad_h[ci, ti] + l * a
                gx[ci, ti] = <real> (b * a)
                gbs += a * x[ci, ti]
                if ti > 0:
                    gls += a * h[ci, ti - 1]
            gl[ci] = gls
            gb[ci] = gbs
    return gx_arr, gl_arr, gb_arr
