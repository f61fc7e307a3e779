"""Hot numeric kernels with two interchangeable backends.

The default backend compiles the inner loops with numba's ``@njit``
(``cache=True``, so compilation cost is paid once per machine).  Setting
the environment variable ``CSDN_NO_NUMBA=1`` before import selects a
pure numpy/python fallback instead.  Both backends compute the same
arithmetic; forward kernels agree bit for bit, gradient kernels agree to
a few ulps (reduction order differs).

Kernels live here because they dominate training-loop runtime: bilinear
sampling (forward and backward), pairwise box IoU, greedy NMS
suppression, and the assignment-problem augmenting-path solver.
``benchmarks/bench_kernels.py`` times one backend against the other.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

__all__ = [
    "USING_NUMBA",
    "active",
    "get_backend",
    "bilinear_forward",
    "bilinear_backward",
    "bilinear_backward_locations",
    "pairwise_iou",
    "nms_keep",
    "lsap_solve",
]


def _numba_disabled() -> bool:
    return os.environ.get("CSDN_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# Bilinear sampling.  Coordinates are in pixel units; a sample outside
# [0, W-1] x [0, H-1] draws zeros from out-of-range corners.
# ---------------------------------------------------------------------------


def _bilinear_forward_loops(vmap, xs, ys, out):
    h, w, c = vmap.shape
    m = xs.shape[0]
    for i in range(m):
        x = xs[i]
        y = ys[i]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        fx = x - x0
        fy = y - y0
        # zero the weight of out-of-range corners and clip their indices,
        # keeping the inner channel loop branch-free
        mx0 = 1.0 if 0 <= x0 < w else 0.0
        mx1 = 1.0 if 0 <= x0 + 1 < w else 0.0
        my0 = 1.0 if 0 <= y0 < h else 0.0
        my1 = 1.0 if 0 <= y0 + 1 < h else 0.0
        w00 = (1.0 - fy) * (1.0 - fx) * my0 * mx0
        w01 = (1.0 - fy) * fx * my0 * mx1
        w10 = fy * (1.0 - fx) * my1 * mx0
        w11 = fy * fx * my1 * mx1
        x0c = min(max(x0, 0), w - 1)
        x1c = min(max(x0 + 1, 0), w - 1)
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for k in range(c):
            out[i, k] = (
                w00 * vmap[y0c, x0c, k]
                + w01 * vmap[y0c, x1c, k]
                + w10 * vmap[y1c, x0c, k]
                + w11 * vmap[y1c, x1c, k]
            )


def _bilinear_corner_data(vmap, xs, ys):
    """Shared setup for the vectorized numpy path."""
    h, w, _ = vmap.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    ws = (
        (1.0 - fy) * (1.0 - fx),
        (1.0 - fy) * fx,
        fy * (1.0 - fx),
        fy * fx,
    )
    corners = ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1))
    valid = tuple(
        (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w) for cy, cx in corners
    )
    clipped = tuple(
        (np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)) for cy, cx in corners
    )
    return ws, corners, valid, clipped, fx, fy

def _bilinear_forward_numpy(vmap, xs, ys, out):
    ws, _, valid, clipped, _, _ = _bilinear_corner_data(vmap, xs, ys)
    vals = []
    for (cy, cx), ok in zip(clipped, valid):
        v = vmap[cy, cx, :]
        v = np.where(ok[:, None], v, 0.0)
        vals.append(v)
    out[:] = (
        ws[0][:, None] * vals[0]
        + ws[1][:, None] * vals[1]
        + ws[2][:, None] * vals[2]
        + ws[3][:, None] * vals[3]
    )


def _bilinear_backward_loops(vmap, xs, ys, gout, gmap, gxs, gys):
    h, w, c = vmap.shape
    m = xs.shape[0]
    for i in range(m):
        x = xs[i]
        y = ys[i]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        fx = x - x0
        fy = y - y0
        ok_x0 = 0 <= x0 < w
        ok_x1 = 0 <= x0 + 1 < w
        ok_y0 = 0 <= y0 < h
        ok_y1 = 0 <= y0 + 1 < h
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        gx = 0.0
        gy = 0.0
        for k in range(c):
            g = gout[i, k]
            v00 = 0.0
            v01 = 0.0
            v10 = 0.0
            v11 = 0.0
            if ok_y0 and ok_x0:
                gmap[y0, x0, k] += w00 * g
                v00 = vmap[y0, x0, k]
            if ok_y0 and ok_x1:
                gmap[y0, x0 + 1, k] += w01 * g
                v01 = vmap[y0, x0 + 1, k]
            if ok_y1 and ok_x0:
                gmap[y0 + 1, x0, k] += w10 * g
                v10 = vmap[y0 + 1, x0, k]
            if ok_y1 and ok_x1:
                gmap[y0 + 1, x0 + 1, k] += w11 * g
                v11 = vmap[y0 + 1, x0 + 1, k]
            gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
            gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
        gxs[i] = gx
        gys[i] = gy


def _bilinear_backward_loc_loops(vmap, xs, ys, gout, gxs, gys):
    h, w, c = vmap.shape
    m = xs.shape[0]
    for i in range(m):
        x = xs[i]
        y = ys[i]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        fx = x - x0
        fy = y - y0
        m00 = 1.0 if (0 <= y0 < h and 0 <= x0 < w) else 0.0
        m01 = 1.0 if (0 <= y0 < h and 0 <= x0 + 1 < w) else 0.0
        m10 = 1.0 if (0 <= y0 + 1 < h and 0 <= x0 < w) else 0.0
        m11 = 1.0 if (0 <= y0 + 1 < h and 0 <= x0 + 1 < w) else 0.0
        x0c = min(max(x0, 0), w - 1)
        x1c = min(max(x0 + 1, 0), w - 1)
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        gx = 0.0
        gy = 0.0
        for k in range(c):
            g = gout[i, k]
            v00 = m00 * vmap[y0c, x0c, k]
            v01 = m01 * vmap[y0c, x1c, k]
            v10 = m10 * vmap[y1c, x0c, k]
            v11 = m11 * vmap[y1c, x1c, k]
            gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
            gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
        gxs[i] = gx
        gys[i] = gy


def _bilinear_backward_loc_numpy(vmap, xs, ys, gout, gxs, gys):
    ws, _, valid, clipped, fx, fy = _bilinear_corner_data(vmap, xs, ys)
    vals = []
    for (cy, cx), ok in zip(clipped, valid):
        vals.append(np.where(ok[:, None], vmap[cy, cx, :], 0.0))
    v00, v01, v10, v11 = vals
    gxs[:] = np.sum(
        gout * ((1.0 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)),
        axis=1,
    )
    gys[:] = np.sum(
        gout * ((1.0 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)),
        axis=1,
    )


def _bilinear_backward_numpy(vmap, xs, ys, gout, gmap, gxs, gys):
    h, w, c = vmap.shape
    ws, _, valid, clipped, fx, fy = _bilinear_corner_data(vmap, xs, ys)
    flat = gmap.reshape(h * w, c)
    vals = []
    for (cy, cx), wgt, ok in zip(clipped, ws, valid):
        contrib = np.where(ok[:, None], wgt[:, None] * gout, 0.0)
        np.add.at(flat, cy * w + cx, contrib)
        v = np.where(ok[:, None], vmap[cy, cx, :], 0.0)
        vals.append(v)
    v00, v01, v10, v11 = vals
    gxs[:] = np.sum(
        gout * ((1.0 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)),
        axis=1,
    )
    gys[:] = np.sum(
        gout * ((1.0 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)),
        axis=1,
    )


# ---------------------------------------------------------------------------
# Pairwise IoU on corner-form boxes (x1, y1, x2, y2), x2 >= x1, y2 >= y1.
# Zero union yields IoU 0.
# ---------------------------------------------------------------------------


def _pairwise_iou_loops(a, b, out):
    n = a.shape[0]
    m = b.shape[0]
    for i in range(n):
        ax1, ay1, ax2, ay2 = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            bx1, by1, bx2, by2 = b[j, 0], b[j, 1], b[j, 2], b[j, 3]
            iw = min(ax2, bx2) - max(ax1, bx1)
            ih = min(ay2, by2) - max(ay1, by1)
            if iw > 0.0 and ih > 0.0:
                inter = iw * ih
            else:
                inter = 0.0
            union = area_a + (bx2 - bx1) * (by2 - by1) - inter
            out[i, j] = inter / union if union > 0.0 else 0.0


def _pairwise_iou_numpy(a, b, out):
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(
        a[:, None, 0], b[None, :, 0]
    )
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(
        a[:, None, 1], b[None, :, 1]
    )
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    np.divide(inter, union, out=out, where=union > 0.0)
    out[union <= 0.0] = 0.0


# ---------------------------------------------------------------------------
# Greedy same-class suppression.  Boxes arrive pre-sorted (descending
# confidence, ties by original index); returns the keep mask.
# ---------------------------------------------------------------------------


def _nms_keep_loops(boxes, classes, iou_threshold, keep):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        ax1, ay1, ax2, ay2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(i + 1, n):
            if suppressed[j] or classes[j] != classes[i]:
                continue
            iw = min(ax2, boxes[j, 2]) - max(ax1, boxes[j, 0])
            ih = min(ay2, boxes[j, 3]) - max(ay1, boxes[j, 1])
            inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
            area_b = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            union = area_a + area_b - inter
            iou = inter / union if union > 0.0 else 0.0
            if iou > iou_threshold:
                suppressed[j] = True


# ---------------------------------------------------------------------------
# Rectangular assignment by shortest augmenting path (Jonker-Volgenant
# family).  cost is [nr, nc] with nr <= nc; returns col4row, row4col and
# the dual potentials, which the caller uses for tie detection.  Column
# scans ascend, so equal-cost alternatives resolve to the smallest index.
# ---------------------------------------------------------------------------


def _lsap_loops(cost, col4row, row4col, u, v):
    nr, nc = cost.shape
    shortest = np.empty(nc, dtype=np.float64)
    path = np.empty(nc, dtype=np.int64)
    sr = np.empty(nr, dtype=np.bool_)
    sc = np.empty(nc, dtype=np.bool_)
    for cur_row in range(nr):
        shortest[:] = np.inf
        path[:] = -1
        sr[:] = False
        sc[:] = False
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            sr[i] = True
            lowest = np.inf
            j_min = -1
            for j in range(nc):
                if sc[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    shortest[j] = r
                    path[j] = i
                if shortest[j] < lowest:
                    lowest = shortest[j]
                    j_min = j
            min_val = lowest
            sc[j_min] = True
            if row4col[j_min] == -1:
                sink = j_min
            else:
                i = row4col[j_min]
        u[cur_row] += min_val
        for ir in range(nr):
            if sr[ir] and ir != cur_row:
                u[ir] += min_val - shortest[col4row[ir]]
        for j in range(nc):
            if sc[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break


def _build_backend(use_numba: bool) -> SimpleNamespace:
    if use_numba:
        from numba import njit

        jit = njit(cache=True)
        fwd = jit(_bilinear_forward_loops)
        bwd = jit(_bilinear_backward_loops)
        bwd_loc = jit(_bilinear_backward_loc_loops)
        iou = jit(_pairwise_iou_loops)
        nms = jit(_nms_keep_loops)
        lsap = jit(_lsap_loops)
    else:
        fwd = _bilinear_forward_numpy
        bwd = _bilinear_backward_numpy
        bwd_loc = _bilinear_backward_loc_numpy
        iou = _pairwise_iou_numpy
        nms = _nms_keep_loops
        lsap = _lsap_loops

    def bilinear_forward(vmap, xs, ys):
        out = np.zeros((xs.shape[0], vmap.shape[2]), dtype=np.float64)
        fwd(vmap, xs, ys, out)
        return out

    def bilinear_backward(vmap, xs, ys, gout):
        gmap = np.zeros_like(vmap)
        gxs = np.zeros_like(xs)
        gys = np.zeros_like(ys)
        bwd(vmap, xs, ys, gout, gmap, gxs, gys)
        return gmap, gxs, gys

    def bilinear_backward_locations(vmap, xs, ys, gout):
        gxs = np.zeros_like(xs)
        gys = np.zeros_like(ys)
        bwd_loc(vmap, xs, ys, gout, gxs, gys)
        return gxs, gys

    def pairwise_iou(a, b):
        out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
        iou(a, b, out)
        return out

    def nms_keep(boxes, classes, iou_threshold):
        keep = np.zeros(boxes.shape[0], dtype=np.bool_)
        nms(boxes, classes, float(iou_threshold), keep)
        return keep

    def lsap_solve(cost):
        nr, nc = cost.shape
        col4row = np.full(nr, -1, dtype=np.int64)
        row4col = np.full(nc, -1, dtype=np.int64)
        u = np.zeros(nr, dtype=np.float64)
        v = np.zeros(nc, dtype=np.float64)
        lsap(cost, col4row, row4col, u, v)
        return col4row, row4col, u, v

    return SimpleNamespace(
        name="numba" if use_numba else "numpy",
        bilinear_forward=bilinear_forward,
        bilinear_backward=bilinear_backward,
        bilinear_backward_locations=bilinear_backward_locations,
        pairwise_iou=pairwise_iou,
        nms_keep=nms_keep,
        lsap_solve=lsap_solve,
    )


_BACKENDS: dict[str, SimpleNamespace] = {}


def get_backend(name: str) -> SimpleNamespace:
    """Return the named kernel backend ('numba' or 'numpy'), building it lazily."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name not in _BACKENDS:
        _BACKENDS[name] = _build_backend(name == "numba")
    return _BACKENDS[name]


USING_NUMBA = not _numba_disabled()
active = get_backend("numba" if USING_NUMBA else "numpy")

bilinear_forward = active.bilinear_forward
bilinear_backward = active.bilinear_backward
bilinear_backward_locations = active.bilinear_backward_locations
pairwise_iou = active.pairwise_iou
nms_keep = active.nms_keep
lsap_solve = active.lsap_solve
