# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner kernels: image unfolding, depthwise convolution, segment max.

Must stay semantically identical to numpy_impl.py; the accumulation order
(ki, kj outermost) is part of the contract so both backends agree bitwise
except where noted in numpy_impl.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "native"


def im2col(cnp.ndarray[cnp.float64_t, ndim=3] xp, int kh, int kw, int stride):
    cdef int c = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2]
    cdef int ho = (hp - kh) // stride + 1
    cdef int wo = (wp - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((c * kh * kw, ho * wo), dtype=np.float64)
    cdef int ch, ki, kj, y, x, row
    cdef double[:, :, :] xv = xp
    cdef double[:, :] ov = out
    for ch in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ch * kh + ki) * kw + kj
                for y in range(ho):
                    for x in range(wo):
                        ov[row, y * wo + x] = xv[ch, ki + y * stride, kj + x * stride]
    return out


def col2im(cnp.ndarray[cnp.float64_t, ndim=2] cols, int c, int hp, int wp, int kh, int kw, int stride):
    cdef int ho = (hp - kh) // stride + 1
    cdef int wo = (wp - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((c, hp, wp), dtype=np.float64)
    cdef int ch, ki, kj, y, x, row
    cdef double[:, :] cv = cols
    cdef double[:, :, :] ov = out
    for ki in range(kh):
        for kj in range(kw):
            for ch in range(c):
                row = (ch * kh + ki) * kw + kj
                for y in range(ho):
                    for x in range(wo):
                        ov[ch, ki + y * stride, kj + x * stride] += cv[row, y * wo + x]
    return out


def depthwise_fw(cnp.ndarray[cnp.float64_t, ndim=3] xp, cnp.ndarray[cnp.float64_t, ndim=3] w, int stride):
    cdef int c = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2]
    cdef int kh = w.shape[1], kw = w.shape[2]
    cdef int ho = (hp - kh) // stride + 1
    cdef int wo = (wp - kw) // stride + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((c, ho, wo), dtype=np.float64)
    cdef int ch, ki, kj, y, x
    cdef double wv
    cdef double[:, :, :] xv = xp, ov = out, wk = w
    for ki in range(kh):
        for kj in range(kw):
            for ch in range(c):
                wv = wk[ch, ki, kj]
                for y in range(ho):
                    for x in range(wo):
                        ov[ch, y, x] += wv * xv[ch, ki + y * stride, kj + x * stride]
    return out


def depthwise_bw_input(cnp.ndarray[cnp.float64_t, ndim=3] g, cnp.ndarray[cnp.float64_t, ndim=3] w, int hp, int wp, int stride):
    cdef int c = g.shape[0], ho = g.shape[1], wo = g.shape[2]
    cdef int kh = w.shape[1], kw = w.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((c, hp, wp), dtype=np.float64)
    cdef int ch, ki, kj, y, x
    cdef double wv
    cdef double[:, :, :] gv = g, ov = out, wk = w
    for ki in range(kh):
        for kj in range(kw):
            for ch in range(c):
                wv = wk[ch, ki, kj]
                for y in range(ho):
                    for x in range(wo):
                        ov[ch, ki + y * stride, kj + x * stride] += wv * gv[ch, y, x]
    return out


def depthwise_bw_weight(cnp.ndarray[cnp.float64_t, ndim=3] xp, cnp.ndarray[cnp.float64_t, ndim=3] g, int kh, int kw, int stride):
    cdef int c = g.shape[0], ho = g.shape[1], wo = g.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((c, kh, kw), dtype=np.float64)
    cdef int ch, ki, kj, y, x
    cdef double acc
    cdef double[:, :, :] xv = xp, gv = g, ov = out
    for ki in range(kh):
        for kj in range(kw):
            for ch in range(c):
                acc = 0.0
                for y in range(ho):
                    for x in range(wo):
                        acc += xv[ch, ki + y * stride, kj + x * stride] * gv[ch, y, x]
                ov[ch, ki, kj] = acc
    return out


def segment_max(cnp.ndarray[cnp.float64_t, ndim=2] values, cnp.ndarray[cnp.int64_t, ndim=1] starts):
    cdef int p = values.shape[0], c = values.shape[1]
    cdef int s = starts.shape[0] - 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((s, c), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] arg = np.empty((s, c), dtype=np.int64)
    cdef int si, ch
    cdef long r, lo, hi
    cdef double best, v
    cdef long bestr
    cdef double[:, :] vv = values, ov = out
    cdef long[:, :] av = arg
    cdef long[:] sv = starts
    for si in range(s):
        lo = sv[si]
        hi = sv[si + 1]
        for ch in range(c):
            best = vv[lo, ch]
            bestr = lo
            for r in range(lo + 1, hi):
                v = vv[r, ch]
                if v > best:
                    best = v
                    bestr = r
            ov[si, ch] = best
            av[si, ch] = bestr
    return out, arg
