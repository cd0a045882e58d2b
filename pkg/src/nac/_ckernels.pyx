# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: stable top-k, fused logit trajectories, Elman recurrence."""
import numpy as np
from libc.math cimport exp, expm1, tanh
from libc.stdlib cimport malloc, free


EXP_CLAMP = 60.0
cdef double _EXP_CLAMP = 60.0
cdef Py_ssize_t INSERTION_MAX_K = 32


cdef inline double _clamp(double z) nogil:
    if z < -_EXP_CLAMP:
        return -_EXP_CLAMP
    if z > _EXP_CLAMP:
        return _EXP_CLAMP
    return z


cdef void _topk_insertion(const double[:] row, Py_ssize_t k,
                          double[:] vals, long long[:] idx) nogil:
    cdef Py_ssize_t n = row.shape[0]
    cdef Py_ssize_t count = 0, j, pos, m
    cdef double v
    for j in range(n):
        v = row[j]
        if count == k and not (v > vals[k - 1]):
            continue
        # first slot holding a strictly smaller value; equal values stay ahead
        pos = count if count < k else k - 1
        while pos > 0 and vals[pos - 1] < v:
            pos -= 1
        m = count if count < k else k - 1
        while m > pos:
            vals[m] = vals[m - 1]
            idx[m] = idx[m - 1]
            m -= 1
        vals[pos] = v
        idx[pos] = j
        if count < k:
            count += 1


cdef void _merge_sort_desc(const double[:] row, long long* order,
                           long long* tmp, Py_ssize_t n) nogil:
    cdef Py_ssize_t width = 1, lo, mid, hi, i, j, o
    cdef long long* src = order
    cdef long long* dst = tmp
    cdef long long* swap
    while width < n:
        lo = 0
        while lo < n:
            mid = lo + width
            if mid > n:
                mid = n
            hi = lo + 2 * width
            if hi > n:
                hi = n
            i = lo
            j = mid
            o = lo
            while i < mid and j < hi:
                # left run wins ties, which keeps lower indices first
                if row[src[j]] > row[src[i]]:
                    dst[o] = src[j]
                    j += 1
                else:
                    dst[o] = src[i]
                    i += 1
                o += 1
            while i < mid:
                dst[o] = src[i]
                i += 1
                o += 1
            while j < hi:
                dst[o] = src[j]
                j += 1
                o += 1
            lo = hi
        swap = src
        src = dst
        dst = swap
        width *= 2
    if src != order:
        for i in range(n):
            order[i] = src[i]


def topk_lastdim(x, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[x.ndim - 1]
    cdef Py_ssize_t kk = int(k)
    if kk < 1:
        raise ValueError(f"top-k needs k >= 1, got {kk}")
    if kk > n:
        kk = n
    cdef const double[:, :] rows = x.reshape(-1, n)
    cdef Py_ssize_t nrows = rows.shape[0]
    out_vals = np.empty((nrows, kk), dtype=np.float64)
    out_idx = np.empty((nrows, kk), dtype=np.int64)
    cdef double[:, :] vals = out_vals
    cdef long long[:, :] idx = out_idx
    cdef Py_ssize_t r, j
    cdef long long* order
    cdef long long* tmp
    with nogil:
        if kk <= INSERTION_MAX_K:
            for r in range(nrows):
                _topk_insertion(rows[r], kk, vals[r], idx[r])
        else:
            order = <long long*> malloc(n * sizeof(long long))
            tmp = <long long*> malloc(n * sizeof(long long))
            for r in range(nrows):
                for j in range(n):
                    order[j] = j
                _merge_sort_desc(rows[r], order, tmp, n)
                for j in range(kk):
                    idx[r, j] = order[j]
                    vals[r, j] = rows[r, order[j]]
            free(order)
            free(tmp)
    shape = x.shape[:-1] + (kk,)
    return out_vals.reshape(shape), out_idx.reshape(shape)


def _flat3(phi, omega, t):
    shape = np.broadcast(phi, omega, t).shape
    flat = [np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=np.float64), shape)).reshape(-1)
            for a in (phi, omega, t)]
    return shape, flat[0], flat[1], flat[2]


def exact_logits(phi, omega, t):
    shape, fp, fw, ft = _flat3(phi, omega, t)
    out = np.empty(fp.shape[0])
    cdef const double[:] p = fp
    cdef const double[:] w = fw
    cdef const double[:] tt = ft
    cdef double[:] a = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(p.shape[0]):
            a[i] = -(p[i] / w[i]) * expm1(_clamp(-w[i] * tt[i]))
    return out.reshape(shape)


def exact_logits_grad(phi, omega, t, g):
    shape, fp, fw, ft = _flat3(phi, omega, t)
    fg = np.ascontiguousarray(np.broadcast_to(g, shape)).reshape(-1)
    gp_out = np.empty(fp.shape[0])
    gw_out = np.empty(fp.shape[0])
    gt_out = np.empty(fp.shape[0])
    cdef const double[:] p = fp
    cdef const double[:] w = fw
    cdef const double[:] tt = ft
    cdef const double[:] gg = fg
    cdef double[:] gp = gp_out
    cdef double[:] gw = gw_out
    cdef double[:] gt = gt_out
    cdef Py_ssize_t i
    cdef double em, e, astar
    with nogil:
        for i in range(p.shape[0]):
            em = expm1(_clamp(-w[i] * tt[i]))
            e = em + 1.0
            astar = p[i] / w[i]
            gp[i] = gg[i] * (-em / w[i])
            gw[i] = gg[i] * (astar / w[i] * em + astar * tt[i] * e)
            gt[i] = gg[i] * (p[i] * e)
    return gp_out.reshape(shape), gw_out.reshape(shape), gt_out.reshape(shape)


def euler_logits(phi, omega, t, n_steps):
    shape, fp, fw, ft = _flat3(phi, omega, t)
    out = np.empty(fp.shape[0])
    cdef const double[:] p = fp
    cdef const double[:] w = fw
    cdef const double[:] tt = ft
    cdef double[:] a = out
    cdef Py_ssize_t i, s
    cdef Py_ssize_t n = n_steps
    cdef double dt, x
    with nogil:
        for i in range(p.shape[0]):
            dt = tt[i] / n
            x = 0.0
            for s in range(n):
                x = x + dt * (-w[i] * x + p[i])
            a[i] = x
    return out.reshape(shape)


def euler_logits_grad(phi, omega, t, n_steps, g):
    shape, fp, fw, ft = _flat3(phi, omega, t)
    fg = np.ascontiguousarray(np.broadcast_to(g, shape)).reshape(-1)
    gp_out = np.empty(fp.shape[0])
    gw_out = np.empty(fp.shape[0])
    gt_out = np.empty(fp.shape[0])
    cdef const double[:] p = fp
    cdef const double[:] w = fw
    cdef const double[:] tt = ft
    cdef const double[:] gg = fg
    cdef double[:] gp = gp_out
    cdef double[:] gw = gw_out
    cdef double[:] gt = gt_out
    cdef Py_ssize_t i, s
    cdef Py_ssize_t n = n_steps
    cdef double dt, gn, acc_p, acc_w, acc_dt
    cdef double* traj = <double*> malloc((n + 1) * sizeof(double))
    with nogil:
        for i in range(p.shape[0]):
            dt = tt[i] / n
            traj[0] = 0.0
            for s in range(n):
                traj[s + 1] = traj[s] + dt * (-w[i] * traj[s] + p[i])
            gn = gg[i]
            acc_p = 0.0
            acc_w = 0.0
            acc_dt = 0.0
            for s in range(n - 1, -1, -1):
                acc_p = acc_p + gn * dt
                acc_w = acc_w + gn * (-dt * traj[s])
                acc_dt = acc_dt + gn * (-w[i] * traj[s] + p[i])
                gn = gn * (1.0 - dt * w[i])
            gp[i] = acc_p
            gw[i] = acc_w
            gt[i] = acc_dt / n
    free(traj)
    return gp_out.reshape(shape), gw_out.reshape(shape), gt_out.reshape(shape)


def rnn_forward(x, w_x, w_h, b):
    """Elman recurrence h_t = tanh(x_t W_x + h_{t-1} W_h + b) over axis 1 of ``x``."""
    drive_arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64) @ w_x + b)
    wh_arr = np.ascontiguousarray(w_h, dtype=np.float64)
    cdef const double[:, :, :] drive = drive_arr
    cdef const double[:, :] wh = wh_arr
    cdef Py_ssize_t bsz = drive.shape[0], steps = drive.shape[1], dh = wh.shape[0]
    out_arr = np.empty((bsz, steps, dh))
    cdef double[:, :, :] out = out_arr
    cdef Py_ssize_t bi, ti, i, j
    cdef double acc
    with nogil:
        for bi in range(bsz):
            for ti in range(steps):
                for j in range(dh):
                    acc = drive[bi, ti, j]
                    if ti > 0:
                        for i in range(dh):
                            acc = acc + out[bi, ti - 1, i] * wh[i, j]
                    out[bi, ti, j] = tanh(acc)
    return out_arr
