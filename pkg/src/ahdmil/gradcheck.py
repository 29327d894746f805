"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _Recorder, freeze_detached, no_grad


def finite_diff_check(f, point, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``f`` takes a list of tensors and returns a scalar tensor. ``point`` is an
    array or a list of arrays. Detached values and straight-through
    binarizations are recorded at ``point`` and held fixed while perturbing,
    so both sides differentiate the same surrogate.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    # C order so that reshape(-1) below is a view and perturbations land
    points = point if isinstance(point, (list, tuple)) else [point]
    arrays = [np.array(p, dtype=np.float64, order="C") for p in points]
    rec = _Recorder()
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with freeze_detached(rec):
        out = f(leaves)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    out.backward()
    rec.replay = True

    def value(vals):
        with no_grad(), freeze_detached(rec):
            return float(f([Tensor(v) for v in vals]).data)

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = value(arrays)
            flat[j] = orig - h
            down = value(arrays)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
