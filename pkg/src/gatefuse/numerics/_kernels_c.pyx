# cython: language_level=3
"""Compiled attention kernels, same contracts as ``_kernels_py``.

Sequence-axis reductions run in index order so padded inputs reproduce
unpadded results bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def softmax_fwd(const double[:, ::1] x, const unsigned char[:, ::1] visible):
    cdef Py_ssize_t r, j, R = x.shape[0], N = x.shape[1]
    cdef double m, total
    out = np.zeros((R, N))
    cdef double[:, ::1] p = out
    with nogil:
        for r in range(R):
            m = -INFINITY
            for j in range(N):
                if visible[r, j] and x[r, j] > m:
                    m = x[r, j]
            total = 0.0
            for j in range(N):
                if visible[r, j]:
                    p[r, j] = exp(x[r, j] - m)
                    total = total + p[r, j]
            for j in range(N):
                if visible[r, j]:
                    p[r, j] = p[r, j] / total
    return out


def softmax_bwd(const double[:, ::1] p, const double[:, ::1] g):
    cdef Py_ssize_t r, j, R = p.shape[0], N = p.shape[1]
    cdef double dot
    out = np.empty((R, N))
    cdef double[:, ::1] dx = out
    with nogil:
        for r in range(R):
            dot = 0.0
            for j in range(N):
                dot = dot + p[r, j] * g[r, j]
            for j in range(N):
                dx[r, j] = p[r, j] * (g[r, j] - dot)
    return out


def scores_fwd(const double[:, :, ::1] q, const double[:, :, ::1] k, double scale):
    cdef Py_ssize_t G = q.shape[0], Lq = q.shape[1], Lk = k.shape[1], D = q.shape[2]
    cdef Py_ssize_t gi, i, j, d
    cdef double acc
    out = np.empty((G, Lq, Lk))
    cdef double[:, :, ::1] s = out
    with nogil:
        for gi in range(G):
            for i in range(Lq):
                for j in range(Lk):
                    acc = 0.0
                    for d in range(D):
                        acc = acc + q[gi, i, d] * k[gi, j, d]
                    s[gi, i, j] = acc * scale
    return out


def attend_fwd(const double[:, :, ::1] p, const double[:, :, ::1] v):
    cdef Py_ssize_t G = p.shape[0], Lq = p.shape[1], Lk = p.shape[2], D = v.shape[2]
    cdef Py_ssize_t gi, i, j, d
    cdef double pij
    out = np.zeros((G, Lq, D))
    cdef double[:, :, ::1] o = out
    with nogil:
        for gi in range(G):
            for i in range(Lq):
                for j in range(Lk):
                    pij = p[gi, i, j]
                    if pij != 0.0:
                        for d in range(D):
                            o[gi, i, d] += pij * v[gi, j, d]
    return out


def segment_sum_fwd(const double[:, :, ::1] x, const double[:, :, ::1] onehot):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], F = x.shape[2], M = onehot.shape[1]
    cdef Py_ssize_t b, m, t, f
    cdef double wt
    out = np.zeros((B, M, F))
    cdef double[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for m in range(M):
                for t in range(L):
                    wt = onehot[b, m, t]
                    if wt != 0.0:
                        for f in range(F):
                            o[b, m, f] += wt * x[b, t, f]
    return out


def query_mass_fwd(const double[:, :, :, ::1] attn, const double[:, ::1] rows):
    cdef Py_ssize_t B = attn.shape[0], H = attn.shape[1], Lq = attn.shape[2], Lk = attn.shape[3]
    cdef Py_ssize_t b, h, i, t
    cdef double ri
    out = np.zeros((B, Lk))
    acc_arr = np.zeros(Lk)
    cdef double[:, ::1] o = out
    cdef double[::1] acc = acc_arr
    with nogil:
        for b in range(B):
            for h in range(H):
                for t in range(Lk):
                    acc[t] = 0.0
                for i in range(Lq):
                    ri = rows[b, i]
                    if ri != 0.0:
                        for t in range(Lk):
                            acc[t] += ri * attn[b, h, i, t]
                for t in range(Lk):
                    o[b, t] += acc[t]
            for t in range(Lk):
                o[b, t] = o[b, t] / H
    return out
