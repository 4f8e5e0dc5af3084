"""Both kernel backends must agree; the env flag must select them."""

import os
import subprocess
import sys

import numpy as np
import pytest

from ftmnet.kernels import backend_name, numpy_backend

try:
    from ftmnet.kernels import numba_backend
except ImportError:  # pragma: no cover - numba-less environments
    numba_backend = None

needs_numba = pytest.mark.skipif(numba_backend is None, reason="numba not installed")


def test_backend_name_is_valid():
    assert backend_name() in ("numba", "numpy")


def test_im2col_layout_small_case():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    cols = numpy_backend.im2col(x, 2, 2, stride=2, pad=0)
    assert cols.shape == (4, 4)
    assert cols[0].tolist() == [0, 1, 4, 5]
    assert cols[3].tolist() == [10, 11, 14, 15]


def test_col2im_accumulates_overlaps():
    # stride 1, 2x2 kernel on 3x3: center pixel is covered by all 4 patches
    cols = np.ones((4, 4), dtype=np.float32)
    out = numpy_backend.col2im(cols, 1, 1, 3, 3, 2, 2, stride=1, pad=0)
    assert out[0, 0].tolist() == [[1, 2, 1], [2, 4, 2], [1, 2, 1]]


def test_im2col_col2im_adjoint_identity():
    """<im2col(x), c> == <x, col2im(c)> for random operands."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float64)
    cols = numpy_backend.im2col(x, 3, 3, stride=2, pad=1)
    c = rng.normal(size=cols.shape).astype(np.float64)
    back = numpy_backend.col2im(c, 2, 3, 7, 6, 3, 3, stride=2, pad=1)
    assert np.sum(cols * c) == pytest.approx(np.sum(x * back), rel=1e-12)


@needs_numba
@pytest.mark.parametrize("shape,kh,kw,stride,pad", [
    ((2, 3, 8, 8), 3, 3, 1, 1),
    ((1, 4, 9, 7), 3, 3, 2, 1),
    ((3, 1, 5, 5), 1, 1, 1, 0),
    ((1, 2, 6, 6), 5, 3, 2, 2),
])
def test_backends_agree_on_im2col_col2im(shape, kh, kw, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape).astype(np.float32)
    a = numpy_backend.im2col(x, kh, kw, stride, pad)
    b = numba_backend.im2col(x, kh, kw, stride, pad)
    assert np.array_equal(a, b)

    cols = rng.normal(size=a.shape).astype(np.float32)
    n, c, h, w = shape
    ya = numpy_backend.col2im(cols, n, c, h, w, kh, kw, stride, pad)
    yb = numba_backend.col2im(cols, n, c, h, w, kh, kw, stride, pad)
    assert np.allclose(ya, yb, atol=1e-5)


@needs_numba
def test_backends_agree_on_slic_sweeps():
    rng = np.random.default_rng(2)
    h, w, k = 24, 30, 6
    rgb = rng.uniform(size=(h, w, 3)).astype(np.float32)
    centers = np.zeros((k, 5), dtype=np.float32)
    centers[:, :3] = rng.uniform(size=(k, 3))
    centers[:, 3] = rng.uniform(0, h, size=k)
    centers[:, 4] = rng.uniform(0, w, size=k)

    la = np.zeros((h, w), dtype=np.int64)
    da = np.full((h, w), np.inf, dtype=np.float32)
    lb = la.copy()
    db = da.copy()
    numpy_backend.slic_assign(rgb, centers, 0.3, 12, la, da)
    numba_backend.slic_assign(rgb, centers, 0.3, 12, lb, db)
    assert np.array_equal(la, lb)
    assert np.allclose(da, db, atol=1e-5)

    ca, na = numpy_backend.slic_update(rgb, la, k)
    cb, nb = numba_backend.slic_update(rgb, lb, k)
    assert np.array_equal(na, nb)
    assert np.allclose(ca, cb, atol=1e-5)


def _run_import(env_value):
    env = dict(os.environ)
    env["FTMNET_KERNELS"] = env_value
    return subprocess.run(
        [sys.executable, "-c", "import ftmnet.kernels as k; print(k.backend_name())"],
        capture_output=True,
        text=True,
        env=env,
    )


def test_env_flag_selects_numpy_backend():
    proc = _run_import("numpy")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "numpy"


@needs_numba
def test_env_flag_selects_numba_backend():
    proc = _run_import("numba")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "numba"


def test_env_flag_rejects_unknown_backend():
    proc = _run_import("bogus")
    assert proc.returncode != 0
    assert "FTMNET_KERNELS" in proc.stderr
