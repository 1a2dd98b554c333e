# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Typed-loop versions of the kernels in ``_pykernels``.

Same signatures, same tie-breaking. Assignment output is bit-identical to the
numpy backend; IoU and edge weights agree to rounding (libm ``exp`` vs numpy).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, INFINITY, fabs

cnp.import_array()

BACKEND = "native"


def iou_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double ax1, ax2, ay1, ay2, bx1, bx2, by1, by2, iw, ih, inter, union, area_a, val
    for i in range(n):
        ax1 = A[i, 0] - A[i, 2] / 2.0
        ax2 = A[i, 0] + A[i, 2] / 2.0
        ay1 = A[i, 1] - A[i, 3] / 2.0
        ay2 = A[i, 1] + A[i, 3] / 2.0
        area_a = A[i, 2] * A[i, 3]
        for j in range(m):
            bx1 = B[j, 0] - B[j, 2] / 2.0
            bx2 = B[j, 0] + B[j, 2] / 2.0
            by1 = B[j, 1] - B[j, 3] / 2.0
            by2 = B[j, 1] + B[j, 3] / 2.0
            iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
            ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + B[j, 2] * B[j, 3] - inter
            if union > 0.0:
                val = inter / union
                out[i, j] = 1.0 if val > 1.0 else val
    return out_arr


def nms_keep(boxes, scores, classes, double iou_threshold):
    cdef double[::1] S = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = S.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cdef cnp.int64_t[::1] C = np.ascontiguousarray(classes, dtype=np.int64)
    cdef cnp.int64_t[::1] order = np.argsort(-np.asarray(S), kind="stable").astype(np.int64)
    cdef double[:, ::1] ov = iou_matrix(boxes, boxes)
    cdef unsigned char[::1] suppressed = np.zeros(n, dtype=np.uint8)
    keep_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    cdef Py_ssize_t k = 0, a, b, i, j
    for a in range(n):
        i = order[a]
        if suppressed[i]:
            continue
        keep[k] = i
        k += 1
        for b in range(n):
            j = order[b]
            if C[j] == C[i] and ov[i, j] >= iou_threshold:
                suppressed[j] = 1
    return keep_arr[:k].copy()


def pair_edges(centers, motions, emb, double sigma_d, double sigma_v,
               bint use_velocity, bint use_appearance, bint constant_weights,
               double tau_dist, double tau_vel, bint gate_or):
    cdef double[:, ::1] P = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2)
    cdef double[:, ::1] V = np.ascontiguousarray(motions, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t n = P.shape[0]
    cdef Py_ssize_t cap = n * (n - 1) // 2 if n > 1 else 0
    ii_arr = np.empty(cap, dtype=np.int64)
    jj_arr = np.empty(cap, dtype=np.int64)
    w_arr = np.empty(cap, dtype=np.float64)
    d_arr = np.empty(cap, dtype=np.float64)
    dv_arr = np.empty(cap, dtype=np.float64)
    s_arr = np.empty(cap, dtype=np.float64)
    cdef cnp.int64_t[::1] II = ii_arr
    cdef cnp.int64_t[::1] JJ = jj_arr
    cdef double[::1] W = w_arr
    cdef double[::1] D = d_arr
    cdef double[::1] DV = dv_arr
    cdef double[::1] SS = s_arr

    cdef bint has_emb = emb is not None
    cdef double[:, ::1] E
    cdef double[::1] norms
    cdef Py_ssize_t e = 0
    if has_emb:
        E = np.ascontiguousarray(emb, dtype=np.float64)
        e = E.shape[1]
        norms = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, q, k = 0
    cdef double dx, dy, d, vx, vy, dv, s, dot, den, w, acc
    if has_emb:
        for i in range(n):
            acc = 0.0
            for q in range(e):
                acc += E[i, q] * E[i, q]
            norms[i] = sqrt(acc)
    for i in range(n):
        for j in range(i + 1, n):
            dx = P[i, 0] - P[j, 0]
            dy = P[i, 1] - P[j, 1]
            d = sqrt(dx * dx + dy * dy)
            vx = V[i, 0] - V[j, 0]
            vy = V[i, 1] - V[j, 1]
            dv = sqrt(vx * vx + vy * vy)
            if gate_or:
                if not (d < tau_dist or dv < tau_vel):
                    continue
            elif not (d < tau_dist and dv < tau_vel):
                continue
            s = 1.0
            if has_emb:
                den = norms[i] * norms[j]
                if den > 0.0:
                    dot = 0.0
                    for q in range(e):
                        dot += E[i, q] * E[j, q]
                    s = dot / den
                else:
                    s = 0.0
            if constant_weights:
                w = 1.0
            else:
                w = exp(-d / sigma_d)
                if use_velocity:
                    w = w * exp(-dv / sigma_v)
                if use_appearance:
                    w = w * (s if s > 0.0 else 0.0)
            II[k] = i
            JJ[k] = j
            W[k] = w
            D[k] = d
            DV[k] = dv
            SS[k] = s
            k += 1
    return (ii_arr[:k].copy(), jj_arr[:k].copy(), w_arr[:k].copy(),
            d_arr[:k].copy(), dv_arr[:k].copy(), s_arr[:k].copy())


def linear_assignment(cost):
    cost_arr = np.asarray(cost, dtype=np.float64)
    if cost_arr.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    cdef Py_ssize_t r = cost_arr.shape[0], c = cost_arr.shape[1]
    finite_arr = np.isfinite(cost_arr)
    empty = np.zeros(0, dtype=np.int64)
    if r == 0 or c == 0 or not finite_arr.any():
        return empty, empty.copy()
    cdef bint transposed = r > c
    work_arr = cost_arr.T if transposed else cost_arr
    fin_arr = finite_arr.T if transposed else finite_arr
    cdef double big = 2.0 * (np.abs(work_arr[fin_arr]).sum() + 1.0)
    cdef double[:, ::1] C = np.ascontiguousarray(np.where(fin_arr, work_arr, big))
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1]

    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    p_arr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] p = p_arr
    cdef cnp.int64_t[::1] way = np.zeros(m + 1, dtype=np.int64)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, best
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
            best = INFINITY
            j1 = -1
            for j in range(1, m + 1):
                if not used[j] and (j1 < 0 or minv[j] < best):
                    best = minv[j]
                    j1 = j
            delta = best
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    rows = p_arr[1:] - 1
    cols = np.arange(m, dtype=np.int64)
    assigned = rows >= 0
    rows, cols = rows[assigned], cols[assigned]
    if transposed:
        rows, cols = cols, rows
    ok = finite_arr[rows, cols]
    rows, cols = rows[ok], cols[ok]
    order = np.argsort(rows, kind="stable")
    return rows[order].astype(np.int64), cols[order].astype(np.int64)
