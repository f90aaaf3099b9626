import os
import subprocess
import sys

import numpy as np
import pytest

from deskdp import kernels
from deskdp._accel import HAVE_NUMBA


def _cases(r):
    x = r.normal(size=(3, 4, 7, 6)).astype(np.float32)
    k = r.normal(size=(5, 4, 3, 3)).astype(np.float32)
    dy = kernels.IMPLS["numpy"]["conv2d_forward"](x, k, 2, 1)
    xy = r.uniform(0, 50, size=(60, 2))
    boxes = np.concatenate([xy, xy + r.uniform(2, 20, size=(60, 2))], axis=1)
    scores = r.uniform(size=60)
    return {
        "matmul": (r.normal(size=(9, 13)).astype(np.float32), r.normal(size=(13, 4)).astype(np.float32)),
        "conv2d_forward": (x, k, 2, 1),
        "conv2d_grad_input": (dy, k, x.shape, 2, 1),
        "conv2d_grad_weight": (dy, x, k.shape, 2, 1),
        "greedy_nms": (np.ascontiguousarray(boxes[np.argsort(-scores, kind="stable")]), 0.4),
        "soft_nms": (boxes, scores, kernels.SOFT_GAUSSIAN, 0.3, 0.5, 0.001),
    }


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("name", sorted(kernels.IMPLS["numpy"]))
def test_numba_and_numpy_paths_agree(name):
    args = _cases(np.random.default_rng(0))[name]
    a = kernels.IMPLS["numba"][name](*args)
    b = kernels.IMPLS["numpy"][name](*args)
    for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        assert x.shape == y.shape
        assert np.allclose(np.asarray(x, np.float64), np.asarray(y, np.float64), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("", "numba" if HAVE_NUMBA else "numpy")])
def test_env_flag_selects_backend(flag, expected):
    env = {**os.environ, "DESKDP_DISABLE_NUMBA": flag}
    code = ("import deskdp, deskdp.kernels as k; "
            "print(deskdp.backend_name(), k.matmul is k.IMPLS[deskdp.backend_name()]['matmul'])")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == [expected, "True"]
