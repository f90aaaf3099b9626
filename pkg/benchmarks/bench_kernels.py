"""Time each hot kernel on its numba and numpy paths.

    python benchmarks/bench_kernels.py [--repeat N]

Both implementations are called directly from ``kernels.IMPLS``, so the
``DESKDP_DISABLE_NUMBA`` setting does not matter here. Outputs are checked
for agreement before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from deskdp import kernels
from deskdp._accel import HAVE_NUMBA


def _cases(rng):
    x = rng.normal(size=(16, 8, 16, 16)).astype(np.float32)
    k = rng.normal(size=(16, 8, 3, 3)).astype(np.float32)
    dy = kernels.IMPLS["numpy"]["conv2d_forward"](x, k, 1, 1)
    a = rng.normal(size=(256, 512)).astype(np.float32)
    b = rng.normal(size=(512, 64)).astype(np.float32)
    xy = rng.uniform(0, 100, size=(400, 2))
    wh = rng.uniform(5, 30, size=(400, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.uniform(size=400)
    order = np.argsort(-scores, kind="stable")
    return {
        "matmul": (a, b),
        "conv2d_forward": (x, k, 1, 1),
        "conv2d_grad_input": (dy, k, x.shape, 1, 1),
        "conv2d_grad_weight": (dy, x, k.shape, 1, 1),
        "greedy_nms": (np.ascontiguousarray(boxes[order]), 0.5),
        "soft_nms": (boxes, scores, kernels.SOFT_GAUSSIAN, 0.3, 0.5, 0.001),
    }


def _time(fn, args, repeat):
    fn(*args)  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-4, atol=1e-4)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  agree")
    for name, case in _cases(rng).items():
        nb, npf = kernels.IMPLS["numba"][name], kernels.IMPLS["numpy"][name]
        agree = _close(nb(*case), npf(*case))
        t_nb, t_np = _time(nb, case, args.repeat), _time(npf, case, args.repeat)
        print(f"{name:<20} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}  {agree}")


if __name__ == "__main__":
    main()
