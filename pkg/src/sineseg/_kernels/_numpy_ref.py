"""Numpy fallback for the hot kernels.

Implements the same contract as the compiled extension `_native`:
patch gather/scatter for 3D convolution (im2col layout) and the linear
state-space scan used by the context block.  All arrays are C-contiguous,
float32 or float64; z-major (z, y, x) spatial order throughout.
"""

import numpy as np

BACKEND = "numpy"


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def unfold(x, kernel, stride, pad):
    """Gather conv patches of ``x`` (C, D, H, W) into a (C*kd*kh*kw, N) matrix.

    Column n corresponds to output voxel n in z-major order; row
    ((c*kd + iz)*kh + iy)*kw + ix holds the input value under kernel
    offset (iz, iy, ix) for channel c.  Out-of-bounds taps are zero.
    """
    c, d, h, w = x.shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    pd, ph, pw = pad
    do, ho, wo = _out_extent(d, kd, sd, pd), _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    xp = x
    if pd or ph or pw:
        xp = np.zeros((c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, pd:pd + d, ph:ph + h, pw:pw + w] = x
    cols = np.empty((c, kd, kh, kw, do, ho, wo), dtype=x.dtype)
    for iz in range(kd):
        for iy in range(kh):
            for ix in range(kw):
                cols[:, iz, iy, ix] = xp[:, iz:iz + sd * do:sd,
                                         iy:iy + sh * ho:sh,
                                         ix:ix + sw * wo:sw]
    return cols.reshape(c * kd * kh * kw, do * ho * wo)


def fold_add(cols, x_shape, kernel, stride, pad):
    """Adjoint of :func:`unfold`: scatter-add columns back onto the input grid."""
    c, d, h, w = x_shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    pd, ph, pw = pad
    do, ho, wo = _out_extent(d, kd, sd, pd), _out_extent(h, kh, sh, ph), _out_extent(w, kw, sw, pw)
    cols6 = cols.reshape(c, kd, kh, kw, do, ho, wo)
    xp = np.zeros((c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for iz in range(kd):
        for iy in range(kh):
            for ix in range(kw):
                xp[:, iz:iz + sd * do:sd,
                   iy:iy + sh * ho:sh,
                   ix:ix + sw * wo:sw] += cols6[:, iz, iy, ix]
    if pd or ph or pw:
        return np.ascontiguousarray(xp[:, pd:pd + d, ph:ph + h, pw:pw + w])
    return xp


_BLOCK = 64


def _toeplitz_pow(lam, b):
    # L[c, j, i] = lam_c^(j-i) for j >= i, else 0
    idx = np.arange(b)
    diff = idx[:, None] - idx[None, :]
    pw = lam[:, None] ** np.arange(b)
    tril = diff >= 0
    return np.where(tril[None], pw[:, np.clip(diff, 0, b - 1)], 0.0)


def ssm_scan(x, lam, beta):
    """Per-channel first-order recurrence h_t = lam*h_{t-1} + beta*x_t, h_{-1}=0.

    ``x`` is (C, T) in the working dtype; ``lam``/``beta`` are float64.
    Sequential in t; vectorized here by unrolling blocks of the recurrence
    into a lower-triangular Toeplitz multiply (powers of lam decay, so the
    block form is numerically safe for lam in (0, 1)).
    """
    ch, t = x.shape
    h = np.empty_like(x)
    carry = np.zeros(ch, dtype=np.float64)
    tp_full = _toeplitz_pow(lam, min(t, _BLOCK))
    decay = lam[:, None] ** np.arange(1, min(t, _BLOCK) + 1)
    for t0 in range(0, t, _BLOCK):
        xb = beta[:, None] * x[:, t0:t0 + _BLOCK]
        b = xb.shape[1]
        hb = np.matmul(tp_full[:, :b, :b], xb[:, :, None])[:, :, 0]
        hb += decay[:, :b] * carry[:, None]
        h[:, t0:t0 + b] = hb
        carry = hb[:, -1]
    return h


def ssm_scan_grad(grad_h, x, h, lam, beta):
    """Backward pass of :func:`ssm_scan`.

    With a_t = grad_h_t + lam*a_{t+1} (reverse-order scan):
    grad_x_t = beta*a_t (working dtype), grad_beta = sum_t a_t*x_t and
    grad_lam = sum_{t>=1} a_t*h_{t-1} (both float64).
    """
    ones = np.ones_like(beta)
    a = ssm_scan(grad_h[:, ::-1].astype(np.float64), lam, ones)[:, ::-1]
    grad_x = (beta[:, None] * a).astype(grad_h.dtype)
    grad_beta = np.sum(a * x, axis=1, dtype=np.float64)
    grad_lam = np.sum(a[:, 1:] * h[:, :-1], axis=1, dtype=np.float64)
    return np.ascontiguousarray(grad_x), grad_lam, grad_beta
