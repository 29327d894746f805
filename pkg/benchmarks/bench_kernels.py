"""Compare the numba and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 320]

Times each kernel at the shapes a pre-screener branch sees on a bag of
``--batch`` low-resolution patches, then one full branch forward+backward
with each backend swapped in.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from ahdmil import _kernels
from ahdmil.lipn import LipnBranch


def kernel_cases(batch, rng):
    x = rng.standard_normal((batch, 16, 10, 10))
    w3 = rng.standard_normal((16, 3, 3))
    gy = rng.standard_normal((batch, 16, 4, 4))
    cols = rng.standard_normal((batch, 4, 4, 16, 3, 3))
    bn_x = rng.standard_normal((batch, 48, 4, 4))
    g, b = np.ones(48), np.zeros(48)
    inv = np.ones(48)
    xhat = rng.standard_normal(bn_x.shape)
    att = rng.standard_normal((batch, 2))
    return {
        "im2col 16ch 3x3/2": lambda k: k.im2col(x, 3, 2, 4, 4),
        "col2im 16ch 3x3/2": lambda k: k.col2im(cols, 10, 10, 2),
        "depthwise fwd 3x3/2": lambda k: k.depthwise_forward(x, w3, 2, 4, 4),
        "depthwise bwd 3x3/2": lambda k: k.depthwise_backward(x, w3, gy, 2),
        "batchnorm fwd 48ch": lambda k: k.bn_train_forward(bn_x, g, b, 1e-5),
        "batchnorm bwd 48ch": lambda k: k.bn_train_backward(bn_x, xhat, g, inv),
        "minmax columns": lambda k: k.minmax_columns(att),
    }


def branch_step(batch, rng):
    branch = LipnBranch(2, np.random.default_rng(0))
    x = rng.uniform(size=(batch, 3, 16, 16))

    def step(_):
        out = branch.logits(x, training=True, update_stats=False).sum()
        out.backward()

    return step


def bench(fn, backend, repeat):
    fn(backend)  # warm-up (and numba compilation)
    times = timeit.repeat(lambda: fn(backend), number=1, repeat=repeat)
    return float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=320)
    args = ap.parse_args(argv)
    if _kernels.numba_backend is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    backends = (_kernels.numpy_backend, _kernels.numba_backend)

    print(f"{'case':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in kernel_cases(args.batch, rng).items():
        t_np, t_nb = (bench(fn, k, args.repeat) for k in backends)
        print(f"{name:<26}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")

    step = branch_step(args.batch, rng)
    saved = _kernels.backend
    results = []
    try:
        for k in backends:
            _kernels.backend = k
            results.append(bench(step, k, max(3, args.repeat // 4)))
    finally:
        _kernels.backend = saved
    t_np, t_nb = results
    print(f"{'branch fwd+bwd':<26}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
