"""From-scratch 3D network layers with hand-written backward passes.

Feature maps are plain (C, z, y, x) numpy arrays.  Convolutions run as an
im2col gather (hot kernel, compiled or numpy fallback) followed by a BLAS
matmul.  Each layer caches what backward needs during forward(train=True)
and writes parameter gradients into ``self.grads`` keyed like
``self.params``; backward returns the gradient w.r.t. the layer input.
Every layer instance appears at most once in a network graph, so backward
assigns rather than accumulates.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class Layer:
    """Base: parameter/gradient dicts plus the forward/backward contract."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def clear_cache(self):
        self._cache = None


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Layer):
    """3D convolution with 'same' padding (kernel//2) and per-axis stride.

    ``bias=False`` for convolutions feeding an instance norm: the norm
    removes constant channel shifts exactly, so such a bias would be a
    dead parameter.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1), rng=None,
                 dtype=np.float32, bias=True):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.pad = tuple(k // 2 for k in self.kernel)
        fan_in = in_ch * int(np.prod(self.kernel))
        if rng is None:
            weight = np.zeros((out_ch, in_ch) + self.kernel, dtype=dtype)
        else:
            weight = he_normal(rng, (out_ch, in_ch) + self.kernel, fan_in, dtype)
        self.params = {"weight": weight}
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self._cache = None

    def forward(self, x, train=True):
        if x.shape[0] != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {x.shape[0]}")
        cols = _kernels.unfold(np.ascontiguousarray(x), self.kernel, self.stride, self.pad)
        w = self.params["weight"].reshape(self.out_ch, -1)
        y = w @ cols
        if "bias" in self.params:
            y += self.params["bias"][:, None]
        out_dims = tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(x.shape[1:], self.kernel, self.stride, self.pad))
        self._cache = (cols, x.shape) if train else None
        return y.reshape((self.out_ch,) + out_dims)

    def backward(self, gy):
        cols, x_shape = self._cache
        gy_mat = gy.reshape(self.out_ch, -1)
        self.grads["weight"] = (gy_mat @ cols.T).reshape(self.params["weight"].shape)
        if "bias" in self.params:
            self.grads["bias"] = gy_mat.sum(axis=1)
        w = self.params["weight"].reshape(self.out_ch, -1)
        gcols = np.ascontiguousarray(w.T @ gy_mat)
        return _kernels.fold_add(gcols, x_shape, self.kernel, self.stride, self.pad)


class UpConv3d(Layer):
    """Transposed convolution with kernel == stride (non-overlapping upsample)."""

    def __init__(self, in_ch, out_ch, scale, rng, dtype=np.float32):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.scale = tuple(scale)
        fan_in = in_ch * int(np.prod(self.scale))
        self.params = {
            "weight": he_normal(rng, (in_ch, out_ch) + self.scale, fan_in, dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }
        self._cache = None

    def forward(self, x, train=True):
        d, h, w = x.shape[1:]
        sz, sy, sx = self.scale
        y6 = np.einsum("cdhw,ckijl->kdihjwl", x, self.params["weight"], optimize=True)
        y = y6.reshape(self.out_ch, d * sz, h * sy, w * sx)
        y += self.params["bias"][:, None, None, None]
        self._cache = x if train else None
        return y

    def backward(self, gy):
        x = self._cache
        d, h, w = x.shape[1:]
        sz, sy, sx = self.scale
        g6 = gy.reshape(self.out_ch, d, sz, h, sy, w, sx)
        self.grads["weight"] = np.einsum("kdihjwl,cdhw->ckijl", g6, x, optimize=True)
        self.grads["bias"] = gy.sum(axis=(1, 2, 3))
        return np.einsum("kdihjwl,ckijl->cdhw", g6, self.params["weight"], optimize=True)


class InstanceNorm3d(Layer):
    """Per-channel normalization over the spatial axes, with learned affine."""

    def __init__(self, channels, dtype=np.float32, eps=NORM_EPS):
        super().__init__()
        self.eps = eps
        self.params = {
            "scale": np.ones(channels, dtype=dtype),
            "shift": np.zeros(channels, dtype=dtype),
        }
        self._cache = None

    def forward(self, x, train=True):
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        var = x.var(axis=(1, 2, 3), keepdims=True)
        std = np.sqrt(var + self.eps)
        xhat = (x - mu) / std
        y = self.params["scale"][:, None, None, None] * xhat \
            + self.params["shift"][:, None, None, None]
        self._cache = (xhat, std) if train else None
        return y

    def backward(self, gy):
        xhat, std = self._cache
        self.grads["scale"] = np.sum(gy * xhat, axis=(1, 2, 3))
        self.grads["shift"] = np.sum(gy, axis=(1, 2, 3))
        gxhat = gy * self.params["scale"][:, None, None, None]
        m1 = gxhat.mean(axis=(1, 2, 3), keepdims=True)
        m2 = (gxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
        return (gxhat - m1 - xhat * m2) / std


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        self._cache = None

    def forward(self, x, train=True):
        neg = x < 0
        y = np.where(neg, self.slope * x, x)
        self._cache = neg if train else None
        return y

    def backward(self, gy):
        neg = self._cache
        return np.where(neg, self.slope * gy, gy)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class SSMBlock(Layer):
    """Pluggable context block: diagonal linear state-space scan + residual.

    Spatial positions are flattened z-major into a sequence; per channel,
    h_t = lam*h_{t-1} + beta*x_t with lam = sigmoid(lam_raw) in (0, 1),
    then y_t = gamma*h_t + x_t.  gamma starts at zero so the block is an
    exact identity at initialization.
    """

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params = {
            "lam_raw": np.zeros(channels, dtype=dtype),   # sigmoid -> lam = 0.5
            "beta": np.ones(channels, dtype=dtype),
            "gamma": np.zeros(channels, dtype=dtype),
        }
        self._cache = None

    def forward(self, x, train=True):
        c = x.shape[0]
        seq = np.ascontiguousarray(x.reshape(c, -1))
        lam = sigmoid(self.params["lam_raw"].astype(np.float64))
        beta = self.params["beta"].astype(np.float64)
        h = _kernels.ssm_scan(seq, lam, beta)
        y = self.params["gamma"][:, None] * h + seq
        self._cache = (seq, h, lam) if train else None
        return y.reshape(x.shape)

    def backward(self, gy):
        seq, h, lam = self._cache
        c = seq.shape[0]
        g = np.ascontiguousarray(gy.reshape(c, -1))
        dtype = seq.dtype
        self.grads["gamma"] = np.sum(g * h, axis=1, dtype=np.float64).astype(dtype)
        grad_h = np.ascontiguousarray(self.params["gamma"][:, None] * g)
        beta = self.params["beta"].astype(np.float64)
        gx_scan, grad_lam, grad_beta = _kernels.ssm_scan_grad(grad_h, seq, h, lam, beta)
        self.grads["beta"] = grad_beta.astype(dtype)
        self.grads["lam_raw"] = (grad_lam * lam * (1.0 - lam)).astype(dtype)
        return (g + gx_scan).reshape(gy.shape)


class ResidualBlock(Layer):
    """conv-norm-act-conv-norm plus a (projected) skip, activation after the add.

    The projection is a strided 1x1x1 convolution whenever the channel
    count or stride changes, identity otherwise.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1), rng=None,
                 dtype=np.float32):
        super().__init__()
        self.conv1 = Conv3d(in_ch, out_ch, kernel, stride, rng, dtype, bias=False)
        self.norm1 = InstanceNorm3d(out_ch, dtype)
        self.act1 = LeakyReLU()
        self.conv2 = Conv3d(out_ch, out_ch, kernel, (1, 1, 1), rng, dtype, bias=False)
        self.norm2 = InstanceNorm3d(out_ch, dtype)
        self.act_out = LeakyReLU()
        if in_ch != out_ch or tuple(stride) != (1, 1, 1):
            self.proj = Conv3d(in_ch, out_ch, (1, 1, 1), stride, rng, dtype)
        else:
            self.proj = None

    def sublayers(self):
        named = [("conv1", self.conv1), ("norm1", self.norm1),
                 ("conv2", self.conv2), ("norm2", self.norm2)]
        if self.proj is not None:
            named.append(("proj", self.proj))
        return named

    def forward(self, x, train=True):
        t = self.act1.forward(self.norm1.forward(self.conv1.forward(x, train), train), train)
        t = self.norm2.forward(self.conv2.forward(t, train), train)
        s = x if self.proj is None else self.proj.forward(x, train)
        return self.act_out.forward(t + s, train)

    def backward(self, gy):
        g = self.act_out.backward(gy)
        gt = self.norm2.backward(g)
        gt = self.conv2.backward(gt)
        gt = self.act1.backward(gt)
        gt = self.norm1.backward(gt)
        gx = self.conv1.backward(gt)
        gx += g if self.proj is None else self.proj.backward(g)
        return gx


class ConvNormAct(Layer):
    """Single conv-norm-act unit (the decoder's one convolution per stage)."""

    def __init__(self, in_ch, out_ch, kernel, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(in_ch, out_ch, kernel, (1, 1, 1), rng, dtype, bias=False)
        self.norm = InstanceNorm3d(out_ch, dtype)
        self.act = LeakyReLU()

    def sublayers(self):
        return [("conv", self.conv), ("norm", self.norm)]

    def forward(self, x, train=True):
        return self.act.forward(self.norm.forward(self.conv.forward(x, train), train), train)

    def backward(self, gy):
        return self.conv.backward(self.norm.backward(self.act.backward(gy)))
