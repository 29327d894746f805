"""Chebyshev Kolmogorov-Arnold classification head.

Each class owns a coefficient matrix of shape (Q, K+1). The logit for class
``c`` is the sum over dimensions ``q`` and degrees ``k`` of
``T_k(tanh(e))[q] * coef[c, q, k]``, with ``T_k`` built by the three-term
recurrence ``T_k = 2 x T_{k-1} - T_{k-2}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _result, as_tensor, tanh

_DOMAIN_TOL = 1e-9


def chebyshev_basis(x, degree: int) -> np.ndarray:
    """Evaluate T_0..T_degree elementwise; returns ``x.shape + (degree+1,)``."""
    x = np.asarray(x, dtype=np.float64)
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if np.any(np.abs(x) > 1.0 + _DOMAIN_TOL):
        raise ValueError("chebyshev_basis: inputs must lie in [-1, 1]")
    out = np.empty(x.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = x
    for k in range(2, degree + 1):
        out[..., k] = 2.0 * x * out[..., k - 1] - out[..., k - 2]
    return out


def _chebyshev_derivative(x, basis):
    # T'_k = 2 T_{k-1} + 2 x T'_{k-1} - T'_{k-2}
    d = np.zeros_like(basis)
    if basis.shape[-1] > 1:
        d[..., 1] = 1.0
    for k in range(2, basis.shape[-1]):
        d[..., k] = 2.0 * basis[..., k - 1] + 2.0 * x * d[..., k - 1] - d[..., k - 2]
    return d


def chebyshev(x, degree: int) -> Tensor:
    """Differentiable :func:`chebyshev_basis` on a tensor."""
    x = as_tensor(x)
    basis = chebyshev_basis(x.data, degree)
    xd = x.data

    def grad_fn(g):
        return ((g * _chebyshev_derivative(xd, basis)).sum(axis=-1),)

    return _result(basis, (x,), grad_fn)


@dataclass
class CkaHead:
    coef: Tensor  # (C, Q, K+1)

    def __post_init__(self):
        c, _, kp1 = self.coef.shape
        if c < 2 or kp1 < 2:
            raise ValueError("CKA head needs C >= 2 and K >= 1")
        if not np.all(np.isfinite(self.coef.data)):
            raise ValueError("CKA coefficients must be finite")

    @property
    def degree(self) -> int:
        return self.coef.shape[2] - 1

    @property
    def n_classes(self) -> int:
        return self.coef.shape[0]

    def __call__(self, e) -> Tensor:
        return cka_logits(e, self.coef)


def cka_logits(e, coef) -> Tensor:
    """Logits for a (C, Q) stack of class representations, row c scored by class c."""
    e, coef = as_tensor(e), as_tensor(coef)
    if not np.all(np.isfinite(e.data)):
        raise ValueError("CKA input must be finite")
    basis = chebyshev(tanh(e), coef.shape[2] - 1)  # (C, Q, K+1)
    return (basis * coef).sum(axis=(1, 2))


def cka_forward(e, coef_c) -> Tensor:
    """Scalar logit for one class: ``e`` is (Q,), ``coef_c`` is (Q, K+1)."""
    e, coef_c = as_tensor(e), as_tensor(coef_c)
    if not np.all(np.isfinite(e.data)):
        raise ValueError("CKA input must be finite")
    basis = chebyshev(tanh(e), coef_c.shape[1] - 1)
    return (basis * coef_c).sum()


def init_xavier(q: int, degree: int, n_classes: int, rng) -> CkaHead:
    """Coefficients ~ U(-a, a) with a = sqrt(6 / (Q + K + 1))."""
    if min(q, degree, n_classes) <= 0:
        raise ValueError("dimensions must be positive")
    a = np.sqrt(6.0 / (q + degree + 1))
    coef = rng.uniform(-a, a, size=(n_classes, q, degree + 1))
    return CkaHead(Tensor(coef, requires_grad=True, name="cka.coef"))
