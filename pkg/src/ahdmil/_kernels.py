"""Convolution inner loops.

Two interchangeable backends implement the same kernels:

* ``im2col`` / ``col2im`` gather and scatter sliding windows, laid out as
  (B, Ho, Wo, C, k, k), for dense convolution (the matmul itself always goes
  through BLAS),
* ``depthwise_forward`` / ``depthwise_backward`` for per-channel convolution,
* ``bn_train_forward`` / ``bn_train_backward`` for training-mode batch
  normalization over (B, H, W),
* ``minmax_columns`` for per-column range normalization.

The numba backend is used when numba imports cleanly and the environment
variable ``AHDMIL_DISABLE_NUMBA`` is unset or ``0``. Both backends are always
importable as ``numpy_backend`` and ``numba_backend`` (the latter is ``None``
without numba) so tests and benchmarks can compare them directly.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------

def _np_im2col(xp, k, stride, ho, wo):
    # -> (B, Ho, Wo, C, k, k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _np_col2im(cols, hp, wp, stride):
    b, ho, wo, c, k, _ = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _np_depthwise_forward(xp, w, stride, ho, wo):
    # w: (C, k, k)
    k = w.shape[1]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            out += xp[:, :, i:i_end:stride, j:j_end:stride] * w[None, :, i, j, None, None]
    return out


def _np_depthwise_backward(xp, w, gy, stride):
    k = w.shape[1]
    ho, wo = gy.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            window = xp[:, :, i:i_end:stride, j:j_end:stride]
            gw[:, i, j] = np.einsum("bchw,bchw->c", window, gy)
            gxp[:, :, i:i_end:stride, j:j_end:stride] += gy * w[None, :, i, j, None, None]
    return gxp, gw


def _np_bn_train_forward(x, gamma, beta, eps):
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, xhat, mu, var


def _np_bn_train_backward(g, xhat, gamma, inv):
    m = g.shape[0] * g.shape[2] * g.shape[3]
    gbeta = g.sum(axis=(0, 2, 3))
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv / m)[None, :, None, None]
    gx = scale * (m * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
    return gx, ggamma, gbeta


def _np_minmax_columns(a):
    lo = a.min(axis=0)
    hi = a.max(axis=0)
    span = hi - lo
    out = np.full(a.shape, 0.5)
    ok = span > 0
    out[:, ok] = (a[:, ok] - lo[ok]) / span[ok]
    return out


numpy_backend = SimpleNamespace(
    name="numpy",
    im2col=_np_im2col,
    col2im=_np_col2im,
    depthwise_forward=_np_depthwise_forward,
    depthwise_backward=_np_depthwise_backward,
    bn_train_forward=_np_bn_train_forward,
    bn_train_backward=_np_bn_train_backward,
    minmax_columns=_np_minmax_columns,
)


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

def _build_numba_backend():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def im2col(xp, k, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        cols = np.empty((b, ho, wo, c, k, k), dtype=xp.dtype)
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        for i in range(k):
                            row = y * stride + i
                            for j in range(k):
                                cols[n, y, x, ch, i, j] = xp[n, ch, row, x * stride + j]
        return cols

    @njit
    def col2im(cols, hp, wp, stride):
        b, ho, wo, c, k = cols.shape[0], cols.shape[1], cols.shape[2], cols.shape[3], cols.shape[4]
        out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        for i in range(k):
                            row = y * stride + i
                            for j in range(k):
                                out[n, ch, row, x * stride + j] += cols[n, y, x, ch, i, j]
        return out

    @njit
    def depthwise_forward(xp, w, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        k = w.shape[1]
        out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for x in range(wo):
                        acc = 0.0
                        for i in range(k):
                            row = y * stride + i
                            for j in range(k):
                                acc += xp[n, ch, row, x * stride + j] * w[ch, i, j]
                        out[n, ch, y, x] = acc
        return out

    @njit
    def depthwise_backward(xp, w, gy, stride):
        b, c = xp.shape[0], xp.shape[1]
        k = w.shape[1]
        ho, wo = gy.shape[2], gy.shape[3]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for n in range(b):
            for ch in range(c):
                for y in range(ho):
                    for x in range(wo):
                        g = gy[n, ch, y, x]
                        if g == 0.0:
                            continue
                        for i in range(k):
                            row = y * stride + i
                            for j in range(k):
                                col = x * stride + j
                                gw[ch, i, j] += xp[n, ch, row, col] * g
                                gxp[n, ch, row, col] += w[ch, i, j] * g
        return gxp, gw

    @njit
    def bn_train_forward(x, gamma, beta, eps):
        b, c, h, w = x.shape
        m = b * h * w
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        mu = np.empty(c)
        var = np.empty(c)
        for ch in range(c):
            s = 0.0
            for n in range(b):
                for y in range(h):
                    for z in range(w):
                        s += x[n, ch, y, z]
            mean = s / m
            ss = 0.0
            for n in range(b):
                for y in range(h):
                    for z in range(w):
                        d = x[n, ch, y, z] - mean
                        ss += d * d
            v = ss / m
            inv = 1.0 / np.sqrt(v + eps)
            gm, bt = gamma[ch], beta[ch]
            for n in range(b):
                for y in range(h):
                    for z in range(w):
                        xh = (x[n, ch, y, z] - mean) * inv
                        xhat[n, ch, y, z] = xh
                        out[n, ch, y, z] = xh * gm + bt
            mu[ch] = mean
            var[ch] = v
        return out, xhat, mu, var

    @njit
    def bn_train_backward(g, xhat, gamma, inv):
        b, c, h, w = g.shape
        m = b * h * w
        gx = np.empty_like(g)
        ggamma = np.empty(c)
        gbeta = np.empty(c)
        for ch in range(c):
            sb = 0.0
            sg = 0.0
            for n in range(b):
                for y in range(h):
                    for z in range(w):
                        gv = g[n, ch, y, z]
                        sb += gv
                        sg += gv * xhat[n, ch, y, z]
            scale = gamma[ch] * inv[ch] / m
            for n in range(b):
                for y in range(h):
                    for z in range(w):
                        gx[n, ch, y, z] = scale * (m * g[n, ch, y, z] - sb - xhat[n, ch, y, z] * sg)
            ggamma[ch] = sg
            gbeta[ch] = sb
        return gx, ggamma, gbeta

    @njit
    def minmax_columns(a):
        n, m = a.shape
        out = np.empty((n, m))
        for c in range(m):
            lo = a[0, c]
            hi = a[0, c]
            for r in range(1, n):
                v = a[r, c]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            span = hi - lo
            for r in range(n):
                out[r, c] = (a[r, c] - lo) / span if span > 0 else 0.5
        return out

    return SimpleNamespace(
        name="numba",
        im2col=im2col,
        col2im=col2im,
        depthwise_forward=depthwise_forward,
        depthwise_backward=depthwise_backward,
        bn_train_forward=bn_train_forward,
        bn_train_backward=bn_train_backward,
        minmax_columns=minmax_columns,
    )


numba_backend = _build_numba_backend() if numba is not None else None


def _numba_requested() -> bool:
    flag = os.environ.get("AHDMIL_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


backend = numba_backend if (numba_backend is not None and _numba_requested()) else numpy_backend
