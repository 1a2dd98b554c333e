"""Numpy implementations of the hot kernels.

This module is the reference/fallback backend. ``_ckernels.pyx`` implements the
same functions with typed loops; both must agree (see tests/test_kernels.py).
Boxes are ``(n, 4)`` float arrays in ``cx, cy, w, h`` layout.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"

_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0, dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1 = a[:, 0] - a[:, 2] / 2.0
    ax2 = a[:, 0] + a[:, 2] / 2.0
    ay1 = a[:, 1] - a[:, 3] / 2.0
    ay2 = a[:, 1] + a[:, 3] / 2.0
    bx1 = b[:, 0] - b[:, 2] / 2.0
    bx2 = b[:, 0] + b[:, 2] / 2.0
    by1 = b[:, 1] - b[:, 3] / 2.0
    by2 = b[:, 1] + b[:, 3] / 2.0
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def nms_keep(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices surviving class-wise greedy NMS, in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    n = len(scores)
    if n == 0:
        return _EMPTY_I.copy()
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (overlaps[i] >= iou_threshold) & (classes == classes[i])
    return np.asarray(keep, dtype=np.int64)


def pair_edges(
    centers: np.ndarray,
    motions: np.ndarray,
    emb: np.ndarray | None,
    sigma_d: float,
    sigma_v: float,
    use_velocity: bool,
    use_appearance: bool,
    constant_weights: bool,
    tau_dist: float,
    tau_vel: float,
    gate_or: bool,
):
    """Gate all pairs i < j and weight the survivors.

    Returns ``(i, j, weight, d, dv, s)`` arrays in row-major pair order.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    motions = np.asarray(motions, dtype=np.float64).reshape(-1, 2)
    n = len(centers)
    if n < 2:
        return _EMPTY_I.copy(), _EMPTY_I.copy(), _EMPTY_F.copy(), _EMPTY_F.copy(), _EMPTY_F.copy(), _EMPTY_F.copy()
    ii, jj = np.triu_indices(n, k=1)
    dx = centers[ii, 0] - centers[jj, 0]
    dy = centers[ii, 1] - centers[jj, 1]
    d = np.sqrt(dx * dx + dy * dy)
    vx = motions[ii, 0] - motions[jj, 0]
    vy = motions[ii, 1] - motions[jj, 1]
    dv = np.sqrt(vx * vx + vy * vy)
    if emb is None:
        s = np.ones_like(d)
    else:
        emb = np.asarray(emb, dtype=np.float64)
        norms = np.sqrt(np.einsum("ij,ij->i", emb, emb))
        dots = np.einsum("ij,ij->i", emb[ii], emb[jj])
        den = norms[ii] * norms[jj]
        s = np.zeros_like(d)
        np.divide(dots, den, out=s, where=den > 0)
    if gate_or:
        gate = (d < tau_dist) | (dv < tau_vel)
    else:
        gate = (d < tau_dist) & (dv < tau_vel)
    ii, jj, d, dv, s = ii[gate], jj[gate], d[gate], dv[gate], s[gate]
    if constant_weights:
        w = np.ones_like(d)
    else:
        w = np.exp(-d / sigma_d)
        if use_velocity:
            w = w * np.exp(-dv / sigma_v)
        if use_appearance:
            w = w * np.maximum(s, 0.0)
    return ii.astype(np.int64), jj.astype(np.int64), w, d, dv, s


def linear_assignment(cost: np.ndarray):
    """Minimum-cost one-to-one assignment; infinite entries are never matched.

    Shortest-augmenting-path Hungarian method with dual potentials. Rows are
    inserted in index order and the first minimal column wins each scan, which
    makes the output deterministic under ties. Infinite entries are replaced by
    a constant larger than any sum of finite entries, so the result maximizes
    the number of finite pairs first and minimizes their total cost second.
    Returns ``(rows, cols)`` sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    r, c = cost.shape
    finite = np.isfinite(cost)
    if r == 0 or c == 0 or not finite.any():
        return _EMPTY_I.copy(), _EMPTY_I.copy()
    transposed = r > c
    work = cost.T if transposed else cost
    fin = finite.T if transposed else finite
    big = 2.0 * (np.abs(work[fin]).sum() + 1.0)
    work = np.where(fin, work, big)
    n, m = work.shape

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = work[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    rows = p[1:] - 1
    cols = np.arange(m)
    assigned = rows >= 0
    rows, cols = rows[assigned], cols[assigned]
    if transposed:
        rows, cols = cols, rows
    ok = finite[rows, cols]
    rows, cols = rows[ok], cols[ok]
    order = np.argsort(rows, kind="stable")
    return rows[order].astype(np.int64), cols[order].astype(np.int64)
