"""Convolution, batch normalization and pooling on :class:`Tensor`.

Layout is NCHW throughout. The sliding-window loops live in ``_kernels``;
dense convolution multiplies the gathered windows through BLAS.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, _result, as_tensor


def _out_size(n, k, stride, padding):
    size = (n + 2 * padding - k) // stride + 1
    if size <= 0:
        raise ValueError(
            f"non-positive output size: input {n}, kernel {k}, stride {stride}, padding {padding}"
        )
    return size


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    out[:, :, padding:-padding, padding:-padding] = x
    return out


def _conv1x1(x, weight):
    wd = weight.data[:, :, 0, 0]  # (Cout, Cin)
    xd = x.data
    b, cin, h, w = xd.shape
    x2 = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = (x2 @ wd.T).reshape(b, h, w, -1).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        gw = (g2.T @ x2)[:, :, None, None]
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, weight), grad_fn)


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,Cin,H,W) with ``weight`` (Cout,Cin,k,k). No bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[2]
    b, cin, h, w = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight)
    kern = _kernels.backend
    xp = _pad(x.data, padding)
    cols = kern.im2col(xp, k, stride, ho, wo).reshape(b * ho * wo, cin * k * k)
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, -1)
    out = (cols @ w2.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ w2).reshape(b, ho, wo, cin, k, k)
        gxp = kern.col2im(gcols, xp.shape[2], xp.shape[3], stride)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return gxp, gw

    return _result(np.ascontiguousarray(out), (x, weight), grad_fn)


def depthwise_conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` is (C,1,k,k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[2]
    _, _, h, w = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    kern = _kernels.backend
    xp = _pad(x.data, padding)
    wd = np.ascontiguousarray(weight.data[:, 0])
    out = kern.depthwise_forward(xp, wd, stride, ho, wo)

    def grad_fn(g):
        gxp, gw = kern.depthwise_backward(xp, wd, np.ascontiguousarray(g), stride)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return gxp, gw[:, None]

    return _result(out, (x, weight), grad_fn)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over (B,H,W) per channel.

    In training mode batch statistics normalize the input and, when
    ``update_stats`` is set, the running buffers are updated in place
    (unbiased variance, as the usual convention). Eval mode normalizes with
    the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batchnorm2d: {c} channels but parameters of shape {gamma.shape}")
    xd = x.data
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if training:
        kern = _kernels.backend
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        xd = np.ascontiguousarray(xd)
        out, xhat, mu, var = kern.bn_train_forward(xd, gamma.data, beta.data, eps)
        if update_stats:
            unbiased = var * m / (m - 1) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        gd = gamma.data

        def grad_fn(g):
            return kern.bn_train_backward(np.ascontiguousarray(g), xhat, gd, inv)

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * g_ + b_

        def grad_fn(g):
            return (
                g * g_ * inv[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    return _result(out, (x, gamma, beta), grad_fn)


def global_avgpool(x) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    shape = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), shape).copy(),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored (in, out)."""
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias
