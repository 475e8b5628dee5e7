# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def scatter_add_rows(double[:, ::1] out, cnp.int64_t[::1] idx, double[:, ::1] src):
    cdef Py_ssize_t i, j, row
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = out.shape[1]
    with nogil:
        for i in range(n):
            row = idx[i]
            for j in range(d):
                out[row, j] += src[i, j]


def ple_encode_batch(x, boundaries):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(boundaries, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t n_bins = b.shape[0] - 1
    out_arr = np.empty((n, n_bins), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, t
    cdef double v, lo, hi
    with nogil:
        for i in range(n):
            v = xv[i]
            for t in range(n_bins):
                lo = b[t]
                hi = b[t + 1]
                if t > 0 and v < lo:
                    out[i, t] = 0.0
                elif t < n_bins - 1 and v >= hi:
                    out[i, t] = 1.0
                else:
                    out[i, t] = (v - lo) / (hi - lo)
    return out_arr


cdef long long _pair_count2(double *pos, Py_ssize_t n_pos,
                            double *neg, Py_ssize_t n_neg) noexcept nogil:
    # both arrays sorted ascending; returns 2*U with ties counted once
    cdef long long total = 0
    cdef Py_ssize_t i = 0, lo = 0, hi = 0
    cdef double v
    while i < n_pos:
        v = pos[i]
        while lo < n_neg and neg[lo] < v:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < n_neg and neg[hi] <= v:
            hi += 1
        total += 2 * lo + (hi - lo)
        i += 1
    return total


def auc_mann_whitney(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(labels).astype(bool)
    cdef double[::1] pos = np.sort(s[mask])
    cdef double[::1] neg = np.sort(s[~mask])
    cdef Py_ssize_t n_pos = pos.shape[0], n_neg = neg.shape[0]
    cdef long long c2 = _pair_count2(&pos[0], n_pos, &neg[0], n_neg)
    return c2 / (2.0 * n_pos * n_neg)


def bootstrap_aucs(pos, neg, pos_idx, neg_idx):
    # Sort once, then per resample tally how often each sorted position was
    # drawn and merge-walk the two tallies: O(n) per resample, no re-sorting.
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    p_order = np.argsort(pos, kind="stable")
    n_order = np.argsort(neg, kind="stable")
    p_rank = np.empty_like(p_order)
    p_rank[p_order] = np.arange(p_order.shape[0])
    n_rank = np.empty_like(n_order)
    n_rank[n_order] = np.arange(n_order.shape[0])
    cdef double[::1] p = pos[p_order]
    cdef double[::1] q = neg[n_order]
    cdef cnp.int64_t[:, ::1] pi = np.ascontiguousarray(p_rank[np.asarray(pos_idx)], dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ni = np.ascontiguousarray(n_rank[np.asarray(neg_idx)], dtype=np.int64)
    cdef Py_ssize_t n_res = pi.shape[0], n_pos = pi.shape[1], n_neg = ni.shape[1]
    cdef Py_ssize_t len_p = p.shape[0], len_q = q.shape[0]
    out_arr = np.empty(n_res, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef cnp.int64_t[::1] cp = np.zeros(len_p, dtype=np.int64)
    cdef cnp.int64_t[::1] cq = np.zeros(len_q, dtype=np.int64)
    cdef Py_ssize_t r, i, j, k
    cdef long long less, eq, c2
    cdef double v, denom = 2.0 * n_pos * n_neg
    with nogil:
        for r in range(n_res):
            for i in range(len_p):
                cp[i] = 0
            for i in range(len_q):
                cq[i] = 0
            for i in range(n_pos):
                cp[pi[r, i]] += 1
            for i in range(n_neg):
                cq[ni[r, i]] += 1
            c2 = 0
            less = 0
            j = 0
            for i in range(len_p):
                if cp[i] == 0:
                    continue
                v = p[i]
                while j < len_q and q[j] < v:
                    less += cq[j]
                    j += 1
                eq = 0
                k = j
                while k < len_q and q[k] == v:
                    eq += cq[k]
                    k += 1
                c2 += cp[i] * (2 * less + eq)
            out[r] = c2 / denom
    return out_arr
