"""Dual-branch low-resolution instance pre-screener.

A branch maps each low-resolution patch to per-class relevance scores in
(0, 1). Patch mode follows the lightweight MobileNet-style stack below; vector
mode swaps in a small perceptron for cheap experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import functional as Fn
from . import tensor as T
from .dmin import relevance_union
from .tensor import Tensor

BETAS = (1.0, 1.0)

# (name, kind, spec). ConvBN: (cin, cout, k, s); UIB: (cin, cout, sdk, mdk, e, s)
PATCH_LAYERS = (
    ("ConvBN-1", "convbn", (3, 16, 3, 2)),
    ("ConvBN-2", "convbn", (16, 16, 3, 2)),
    ("ConvBN-3", "convbn", (16, 16, 1, 1)),
    ("ConvBN-4", "convbn", (16, 48, 3, 2)),
    ("ConvBN-5", "convbn", (48, 24, 1, 1)),
    ("UIB-1", "uib", (24, 48, 5, 5, 2, 2)),
    ("UIB-2", "uib", (48, 64, 3, 3, 2, 2)),
    ("AvgPool", "avgpool", None),
    ("ConvBN-6", "convbn", (64, 64, 1, 1)),
    ("Flatten", "flatten", None),
    ("Linear-1", "linear", (64, None)),
)
MLP_HIDDEN = 64


class EmptySelectionError(RuntimeError):
    pass


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class LipnBranch:
    """One pre-screening branch: learnable ``params`` plus batchnorm ``buffers``."""

    def __init__(self, n_classes: int, rng, mode: str = "patch", dim_lo: int = 0):
        if mode not in ("patch", "vector"):
            raise ValueError(f"unknown branch mode {mode!r}")
        self.mode = mode
        self.n_classes = n_classes
        self.dim_lo = dim_lo
        self.params: dict = {}
        self.buffers: dict = {}
        if mode == "patch":
            self._init_patch(rng)
        else:
            dims = (dim_lo, MLP_HIDDEN, MLP_HIDDEN, n_classes)
            for i in range(3):
                lim = math.sqrt(6.0 / (dims[i] + dims[i + 1]))
                self._param(f"mlp{i}.w", rng.uniform(-lim, lim, size=(dims[i], dims[i + 1])))
                self._param(f"mlp{i}.b", np.zeros(dims[i + 1]))

    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _bn(self, name, c):
        self._param(f"{name}.bn.g", np.ones(c))
        self._param(f"{name}.bn.b", np.zeros(c))
        self.buffers[f"{name}.bn.mean"] = np.zeros(c)
        self.buffers[f"{name}.bn.var"] = np.ones(c)

    def _conv(self, name, cin, cout, k, rng):
        self._param(f"{name}.w", _he(rng, (cout, cin, k, k), cin * k * k))
        self._bn(name, cout)

    def _dw(self, name, c, k, rng):
        self._param(f"{name}.w", _he(rng, (c, 1, k, k), k * k))
        self._bn(name, c)

    def _init_patch(self, rng):
        for name, kind, spec in PATCH_LAYERS:
            if kind == "convbn":
                cin, cout, k, _ = spec
                self._conv(name, cin, cout, k, rng)
            elif kind == "uib":
                cin, cout, sdk, mdk, e, _ = spec
                mid = cin * e
                self._dw(f"{name}.start", cin, sdk, rng)
                self._conv(f"{name}.expand", cin, mid, 1, rng)
                self._dw(f"{name}.middle", mid, mdk, rng)
                self._conv(f"{name}.proj", mid, cout, 1, rng)
            elif kind == "linear":
                cin = spec[0]
                lim = math.sqrt(6.0 / (cin + self.n_classes))
                self._param(f"{name}.w", rng.uniform(-lim, lim, size=(cin, self.n_classes)))
                self._param(f"{name}.b", np.zeros(self.n_classes))

    # -- forward ------------------------------------------------------------
    def _bn_apply(self, name, x, training, update_stats):
        return Fn.batchnorm2d(
            x,
            self.params[f"{name}.bn.g"],
            self.params[f"{name}.bn.b"],
            self.buffers[f"{name}.bn.mean"],
            self.buffers[f"{name}.bn.var"],
            training,
            update_stats=update_stats,
        )

    def _convbn(self, name, x, k, s, training, update_stats, act=True):
        y = Fn.conv2d(x, self.params[f"{name}.w"], stride=s, padding=k // 2)
        y = self._bn_apply(name, y, training, update_stats)
        return T.relu(y) if act else y

    def _dwbn(self, name, x, k, s, training, update_stats):
        y = Fn.depthwise_conv2d(x, self.params[f"{name}.w"], stride=s, padding=k // 2)
        return T.relu(self._bn_apply(name, y, training, update_stats))

    def logits(self, x, training: bool = False, update_stats: bool = True, trace=None) -> Tensor:
        x = T.as_tensor(x)
        if self.mode == "vector":
            if x.ndim != 2 or x.shape[1] != self.dim_lo:
                raise ValueError(f"vector branch expects (N, {self.dim_lo}), got {x.shape}")
            h = x
            for i in range(3):
                h = h @ self.params[f"mlp{i}.w"] + self.params[f"mlp{i}.b"]
                if i < 2:
                    h = T.relu(h)
            return h
        if x.ndim != 4 or x.shape[1:] != (3, 16, 16):
            raise ValueError(f"patch branch expects (N, 3, 16, 16), got {x.shape}")
        for name, kind, spec in PATCH_LAYERS:
            if kind == "convbn":
                _, _, k, s = spec
                x = self._convbn(name, x, k, s, training, update_stats)
            elif kind == "uib":
                _, _, sdk, mdk, _, s = spec
                x = self._dwbn(f"{name}.start", x, sdk, 1, training, update_stats)
                x = self._convbn(f"{name}.expand", x, 1, 1, training, update_stats)
                x = self._dwbn(f"{name}.middle", x, mdk, s, training, update_stats)
                x = self._convbn(f"{name}.proj", x, 1, 1, training, update_stats, act=False)
            elif kind == "avgpool":
                x = Fn.global_avgpool(x)
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:
                x = x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]
            if trace is not None:
                trace.append((name, x.shape))
        return x

    def __call__(self, x, training: bool = False, update_stats: bool = True) -> Tensor:
        """Relevance scores P in (0, 1), shape (N, C)."""
        return T.sigmoid(self.logits(x, training, update_stats))

    # -- state --------------------------------------------------------------
    def arrays(self) -> dict:
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict):
        for n, p in self.params.items():
            p.data = np.array(arrays[n], dtype=np.float64)
        for n in self.buffers:
            self.buffers[n] = np.array(arrays[n], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


class Lipn:
    """Two architecturally identical, independently initialized branches."""

    def __init__(self, n_classes, rng1, rng2, mode="patch", dim_lo=0, lam=0.2, gamma=0.5, r=0.6):
        if not 0.0 <= lam < 1.0:
            raise ValueError("CBEMA ratio must lie in [0, 1)")
        self.branch1 = LipnBranch(n_classes, rng1, mode, dim_lo)
        self.branch2 = LipnBranch(n_classes, rng2, mode, dim_lo)
        self.lam = lam
        self.gamma = gamma
        self.r = r

    def __call__(self, x, training=False, update_stats=True):
        return self.branch1(x, training, update_stats), self.branch2(x, training, update_stats)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def normalize_attention(a) -> np.ndarray:
    """Min-max scale each attention column to [0, 1]; constant columns map to 0.5."""
    a = np.ascontiguousarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    return _kernels.backend.minmax_columns(a)


def crd_loss_hard(p1, p2, m_hr, gamma: float = 0.5) -> Tensor:
    m_hr = np.asarray(m_hr, dtype=np.float64)
    l1 = T.mean(T.tabs(T.straight_through(p1, gamma) - m_hr))
    l2 = T.mean(T.tabs(T.straight_through(p2, gamma) - m_hr))
    return T.scale(l1 + l2, 0.5)


def crd_loss_soft(p1, p2, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    return T.scale(T.mean(T.tabs(p1 - target)) + T.mean(T.tabs(p2 - target)), 0.5)


def lipn_loss(p1, p2, target, mode: str, r: float, gamma: float = 0.5, betas=BETAS) -> tuple:
    """Hybrid pre-screener objective. Returns (loss, terms).

    ``target`` is the binary teacher mask in hard mode and the normalized
    teacher attention in soft mode.
    """
    if mode == "hard":
        dis = crd_loss_hard(p1, p2, target, gamma)
    elif mode == "soft":
        dis = crd_loss_soft(p1, p2, target)
    else:
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")
    r1 = T.mean(relevance_union(T.straight_through(p1, gamma)))
    r2 = T.mean(relevance_union(T.straight_through(p2, gamma)))
    rate = T.scale((r1 - r) ** 2 + (r2 - r) ** 2, 0.5)
    loss = T.scale(dis, betas[0]) + T.scale(rate, betas[1])
    return loss, {"dis3": dis, "rate": rate, "ret1": r1, "ret2": r2}


# ---------------------------------------------------------------------------
# branch blending and selection
# ---------------------------------------------------------------------------

def cbema_update(lipn: Lipn, lam: float | None = None) -> None:
    """Joint assignment theta1, theta2 = (1-l) theta1 + l theta2, (1-l) theta2 + l theta1.

    Batchnorm running statistics are blended by the same rule.
    """
    lam = lipn.lam if lam is None else lam
    if not 0.0 <= lam < 1.0:
        raise ValueError("CBEMA ratio must lie in [0, 1)")
    if lam == 0.0:
        return
    b1, b2 = lipn.branch1, lipn.branch2
    for name in b1.params:
        t1, t2 = b1.params[name].data, b2.params[name].data
        b1.params[name].data, b2.params[name].data = _blend(t1, t2, lam), _blend(t2, t1, lam)
    for name in b1.buffers:
        t1, t2 = b1.buffers[name], b2.buffers[name]
        b1.buffers[name], b2.buffers[name] = _blend(t1, t2, lam), _blend(t2, t1, lam)


def _blend(a, b, lam):
    # a + l (b - a) equals (1-l) a + l b but leaves equal branches bit-identical
    if lam == 0.5:
        return 0.5 * (a + b)
    return a + lam * (b - a)


def merged_mask(p1, p2, gamma: float = 0.5) -> tuple:
    """Binarize the branch mean per class; keep instances with any class on.

    Returns (mask (N, C), kept indices, kept fraction). Raises
    :class:`EmptySelectionError` when nothing survives.
    """
    p1 = p1.data if isinstance(p1, Tensor) else np.asarray(p1)
    p2 = p2.data if isinstance(p2, Tensor) else np.asarray(p2)
    mask = T.binarize((p1 + p2) / 2.0, gamma)
    kept = np.flatnonzero(mask.any(axis=1))
    if kept.size == 0:
        raise EmptySelectionError("empty selection: no instance passed the merged mask")
    return mask, kept, kept.size / mask.shape[0]


def fallback_selection(p1, p2, r: float) -> np.ndarray:
    """Top ceil(rN) instances by their best class score under the branch mean."""
    p1 = p1.data if isinstance(p1, Tensor) else np.asarray(p1)
    p2 = p2.data if isinstance(p2, Tensor) else np.asarray(p2)
    score = ((p1 + p2) / 2.0).max(axis=1)
    k = max(1, math.ceil(r * score.size))
    return np.sort(np.argsort(-score, kind="stable")[:k])


def select(p1, p2, gamma: float, r: float) -> tuple:
    """Merged-mask selection with the top-ceil(rN) fallback.

    Returns (kept indices, kept fraction, used_fallback).
    """
    try:
        _, kept, frac = merged_mask(p1, p2, gamma)
        return kept, frac, False
    except EmptySelectionError:
        kept = fallback_selection(p1, p2, r)
        return kept, kept.size / np.shape(p1)[0], True
