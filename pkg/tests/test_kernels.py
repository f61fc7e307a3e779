"""Both kernel backends must agree: bitwise on forward paths, to a few
ulps on gradient reductions."""

import numpy as np
import pytest

from csdn import kernels

nb = kernels.get_backend("numba")
npk = kernels.get_backend("numpy")


def _random_samples(rng, h, w, n):
    vmap = rng.normal(size=(h, w, 5))
    xs = rng.uniform(-2.0, w + 1.0, size=n)
    ys = rng.uniform(-2.0, h + 1.0, size=n)
    return vmap, xs, ys


def test_bilinear_forward_backends_identical(rng):
    for _ in range(20):
        vmap, xs, ys = _random_samples(rng, 6, 9, 40)
        a = nb.bilinear_forward(vmap, xs, ys)
        b = npk.bilinear_forward(vmap, xs, ys)
        assert np.array_equal(a, b)


def test_bilinear_backward_backends_close(rng):
    for _ in range(10):
        vmap, xs, ys = _random_samples(rng, 5, 7, 30)
        g = rng.normal(size=(30, 5))
        gm1, gx1, gy1 = nb.bilinear_backward(vmap, xs, ys, g)
        gm2, gx2, gy2 = npk.bilinear_backward(vmap, xs, ys, g)
        np.testing.assert_allclose(gm1, gm2, atol=1e-13)
        np.testing.assert_allclose(gx1, gx2, atol=1e-13)
        np.testing.assert_allclose(gy1, gy2, atol=1e-13)
        lx1, ly1 = nb.bilinear_backward_locations(vmap, xs, ys, g)
        lx2, ly2 = npk.bilinear_backward_locations(vmap, xs, ys, g)
        np.testing.assert_allclose(lx1, gx1, atol=1e-13)
        np.testing.assert_allclose(lx1, lx2, atol=1e-13)
        np.testing.assert_allclose(ly1, ly2, atol=1e-13)


def _random_corner_boxes(rng, n):
    xy = rng.uniform(0.0, 0.8, size=(n, 2))
    wh = rng.uniform(0.0, 0.4, size=(n, 2))
    return np.ascontiguousarray(np.c_[xy, xy + wh])


def test_pairwise_iou_backends_identical(rng):
    for _ in range(20):
        a = _random_corner_boxes(rng, 12)
        b = _random_corner_boxes(rng, 9)
        m1 = nb.pairwise_iou(a, b)
        m2 = npk.pairwise_iou(a, b)
        assert np.array_equal(m1, m2)
        assert (m1 >= 0.0).all() and (m1 <= 1.0).all()


def test_nms_backends_identical(rng):
    for _ in range(20):
        boxes = _random_corner_boxes(rng, 25)
        classes = rng.integers(0, 3, size=25)
        thr = float(rng.uniform(0.1, 0.9))
        k1 = nb.nms_keep(boxes, classes, thr)
        k2 = npk.nms_keep(boxes, classes, thr)
        assert np.array_equal(k1, k2)


def test_lsap_backends_identical(rng):
    for _ in range(50):
        m = int(rng.integers(1, 7))
        n = int(rng.integers(m, m + 5))
        cost = rng.normal(size=(m, n))
        r1 = nb.lsap_solve(np.ascontiguousarray(cost))
        r2 = npk.lsap_solve(np.ascontiguousarray(cost))
        for a, b in zip(r1, r2):
            assert np.array_equal(a, b)


def test_lsap_matches_scipy(rng):
    from scipy.optimize import linear_sum_assignment

    for _ in range(100):
        m = int(rng.integers(1, 8))
        n = int(rng.integers(m, m + 6))
        cost = rng.normal(size=(m, n)) * 10.0
        col4row, _, _, _ = kernels.lsap_solve(np.ascontiguousarray(cost))
        ours = cost[np.arange(m), col4row].sum()
        ri, ci = linear_sum_assignment(cost)
        theirs = cost[ri, ci].sum()
        assert ours == pytest.approx(theirs, abs=1e-9)


def test_env_flag_selects_backend():
    import os
    import subprocess
    import sys

    code = "import csdn.kernels as k; print(k.active.name)"
    env = dict(os.environ, CSDN_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env
    )
    assert out.stdout.strip() == "numpy"
    env.pop("CSDN_NO_NUMBA")
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env
    )
    assert out.stdout.strip() == "numba"
