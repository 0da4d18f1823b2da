# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled MLP kernels; same contract as ``mlp_py``.

Rows are processed in fixed chunks of ``CHUNK`` rows. Inside a chunk every
layer is one BLAS call; forward-mode tangents are stored as a
``(features, rows * m)`` matrix so the Jacobian sweep is a single GEMM too.
Parameter gradients are accumulated per chunk and summed afterwards, so the
reduction order does not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
cimport openmp
from libc.math cimport tanh
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef enum:
    CHUNK = 64


def set_num_threads(int n):
    openmp.omp_set_num_threads(n)


def get_num_threads():
    return openmp.omp_get_max_threads()


cdef inline void _mm(char ta, char tb, int M, int N, int K, double alpha,
                     const double* A, int lda, const double* B, int ldb,
                     double beta, double* C) noexcept nogil:
    # Row-major C (M x N) = alpha * op(A) op(B) + beta * C, done as the
    # column-major product C^T = op(B)^T op(A)^T.
    cdef int ldc = N
    dgemm(&tb, &ta, &N, &M, &K, &alpha, <double*> B, &ldb, <double*> A, &lda,
          &beta, C, &ldc)


cdef struct Work:
    double* hs     # nl blocks of (R, maxw): layer inputs
    double* ss     # nl blocks of (R, maxw): tanh slopes of hidden layers
    double* das    # nl blocks of (maxw, R*m): pre-activation tangents
    double* dhs    # nl blocks of (maxw, R*m): input tangents (k >= 1)
    double* act    # (R, maxw) scratch
    double* ga     # (R, maxw)
    double* gh     # (R, maxw)
    double* gda    # (maxw, R*m)
    double* gdh    # (maxw, R*m)


cdef Work* _alloc(int nl, int maxw, int m) noexcept nogil:
    cdef size_t blk = CHUNK * maxw
    cdef size_t tblk = CHUNK * maxw * m
    cdef Work* w = <Work*> malloc(sizeof(Work))
    w.hs = <double*> malloc(sizeof(double) * nl * blk)
    w.ss = <double*> malloc(sizeof(double) * nl * blk)
    w.das = <double*> malloc(sizeof(double) * nl * tblk)
    w.dhs = <double*> malloc(sizeof(double) * nl * tblk)
    w.act = <double*> malloc(sizeof(double) * blk)
    w.ga = <double*> malloc(sizeof(double) * blk)
    w.gh = <double*> malloc(sizeof(double) * blk)
    w.gda = <double*> malloc(sizeof(double) * tblk)
    w.gdh = <double*> malloc(sizeof(double) * tblk)
    return w


cdef void _release(Work* w) noexcept nogil:
    free(w.hs)
    free(w.ss)
    free(w.das)
    free(w.dhs)
    free(w.act)
    free(w.ga)
    free(w.gh)
    free(w.gda)
    free(w.gdh)
    free(w)


cdef void _forward_chunk(const double* theta, const long* sizes, int nl, int m, int maxw,
                         const double* x, int R, double t, bint jac, Work* w,
                         double* out, double* J) noexcept nogil:
    # x: (R, m) rows; out: (R, p); J: (R, p, m) or NULL
    cdef int k, i, j, r, fin, fout, pos = 0, Rm = R * m
    cdef size_t blk = CHUNK * maxw
    cdef size_t tblk = CHUNK * maxw * m
    cdef double a
    cdef const double* W
    cdef const double* b
    cdef double* H
    cdef double* A = w.act
    cdef double* DA
    cdef double* DH
    fin = sizes[0]
    H = w.hs
    for r in range(R):
        for j in range(m):
            H[r * fin + j] = x[r * m + j]
        H[r * fin + m] = t
    for k in range(nl):
        fin = sizes[k]
        fout = sizes[k + 1]
        W = theta + pos
        b = theta + pos + fin * fout
        pos += fin * fout + fout
        H = w.hs + k * blk
        for r in range(R):
            for i in range(fout):
                A[r * fout + i] = b[i]
        _mm(b'N', b'T', R, fout, fin, 1.0, H, fin, W, fin, 1.0, A)
        if jac:
            DA = w.das + k * tblk
            if k == 0:
                for i in range(fout):
                    for r in range(R):
                        for j in range(m):
                            DA[i * Rm + r * m + j] = W[i * fin + j]
            else:
                DH = w.dhs + k * tblk
                _mm(b'N', b'N', fout, Rm, fin, 1.0, W, fin, DH, Rm, 0.0, DA)
        if k < nl - 1:
            H = w.hs + (k + 1) * blk
            for r in range(R):
                for i in range(fout):
                    a = tanh(A[r * fout + i])
                    H[r * fout + i] = a
                    w.ss[k * blk + r * fout + i] = 1.0 - a * a
            if jac:
                DH = w.dhs + (k + 1) * tblk
                for i in range(fout):
                    for r in range(R):
                        a = w.ss[k * blk + r * fout + i]
                        for j in range(m):
                            DH[i * Rm + r * m + j] = a * DA[i * Rm + r * m + j]
        else:
            for r in range(R):
                for i in range(fout):
                    out[r * fout + i] = A[r * fout + i]
            if jac and J != NULL:
                for i in range(fout):
                    for r in range(R):
                        for j in range(m):
                            J[(r * fout + i) * m + j] = DA[i * Rm + r * m + j]


def forward(double[::1] theta, long[::1] sizes, double[:, ::1] x, double t, bint jac=True):
    cdef int nl = sizes.shape[0] - 1
    cdef int n = x.shape[0]
    cdef int m = x.shape[1]
    cdef int p = sizes[nl]
    cdef int maxw = 0, k, c, r0, R
    cdef int nchunks = (n + CHUNK - 1) // CHUNK
    for k in range(nl + 1):
        if sizes[k] > maxw:
            maxw = sizes[k]
    out = np.empty((n, p))
    Jarr = np.empty((n, p, m)) if jac else np.empty((1, 1, 1))
    if n == 0:
        return out, (Jarr if jac else None)
    cdef double[:, ::1] ov = out
    cdef double[:, :, ::1] jv = Jarr
    cdef double* jp = &jv[0, 0, 0]
    cdef Work* w
    with nogil, parallel():
        w = _alloc(nl, maxw, m)
        for c in prange(nchunks, schedule="static"):
            r0 = c * CHUNK
            R = n - r0
            if R > CHUNK:
                R = CHUNK
            _forward_chunk(&theta[0], &sizes[0], nl, m, maxw, &x[r0, 0], R, t, jac, w,
                           &ov[r0, 0], (jp + r0 * p * m) if jac else NULL)
        _release(w)
    return out, (Jarr if jac else None)


cdef void _backward_chunk(const double* theta, const long* sizes, int nl, int m, int maxw,
                          const double* x, int R, double t, const double* gout,
                          const double* gjac, bint second, Work* w,
                          double* grad, double* gx, double* scratch) noexcept nogil:
    cdef int k, i, j, q, r, fin, fout, pos, Rm = R * m
    cdef size_t blk = CHUNK * maxw
    cdef size_t tblk = CHUNK * maxw * m
    cdef const double* W
    cdef double* gW
    cdef double* gb
    cdef double* tmp
    cdef double gs, s
    _forward_chunk(theta, sizes, nl, m, maxw, x, R, t, second, w, scratch, NULL)
    fout = sizes[nl]
    for r in range(R):
        for i in range(fout):
            w.ga[r * fout + i] = gout[r * fout + i]
    if second:
        for i in range(fout):
            for r in range(R):
                for j in range(m):
                    w.gda[i * Rm + r * m + j] = gjac[(r * fout + i) * m + j]
    pos = 0
    for k in range(nl):
        pos += sizes[k] * sizes[k + 1] + sizes[k + 1]
    for k in range(nl - 1, -1, -1):
        fin = sizes[k]
        fout = sizes[k + 1]
        pos -= fin * fout + fout
        W = theta + pos
        gW = grad + pos
        gb = grad + pos + fin * fout
        for r in range(R):
            for i in range(fout):
                gb[i] += w.ga[r * fout + i]
        _mm(b'T', b'N', fout, fin, R, 1.0, w.ga, fout, w.hs + k * blk, fin, 1.0, gW)
        if second:
            if k == 0:
                for i in range(fout):
                    for r in range(R):
                        for j in range(m):
                            gW[i * fin + j] += w.gda[i * Rm + r * m + j]
            else:
                _mm(b'N', b'T', fout, fin, Rm, 1.0, w.gda, Rm, w.dhs + k * tblk, Rm, 1.0, gW)
        if k == 0:
            _mm(b'N', b'N', R, m, fout, 1.0, w.ga, fout, W, fin, 0.0, gx)
            break
        _mm(b'N', b'N', R, fin, fout, 1.0, w.ga, fout, W, fin, 0.0, w.gh)
        if second:
            _mm(b'T', b'N', fin, Rm, fout, 1.0, W, fin, w.gda, Rm, 0.0, w.gdh)
            for q in range(fin):
                for r in range(R):
                    gs = 0.0
                    for j in range(m):
                        gs = gs + w.gdh[q * Rm + r * m + j] * w.das[(k - 1) * tblk + q * Rm + r * m + j]
                    w.gh[r * fin + q] -= 2.0 * w.hs[k * blk + r * fin + q] * gs
                    s = w.ss[(k - 1) * blk + r * fin + q]
                    for j in range(m):
                        w.gdh[q * Rm + r * m + j] = s * w.gdh[q * Rm + r * m + j]
            tmp = w.gda
            w.gda = w.gdh
            w.gdh = tmp
        for r in range(R):
            for q in range(fin):
                w.ga[r * fin + q] = w.ss[(k - 1) * blk + r * fin + q] * w.gh[r * fin + q]


def backward(double[::1] theta, long[::1] sizes, double[:, ::1] x, double t, g_out=None, g_jac=None):
    cdef int nl = sizes.shape[0] - 1
    cdef int n = x.shape[0]
    cdef int m = x.shape[1]
    cdef int p = sizes[nl]
    cdef int P = theta.shape[0]
    cdef int maxw = 0, k, c, r0, R
    cdef bint second = g_jac is not None
    cdef int nchunks = (n + CHUNK - 1) // CHUNK
    for k in range(nl + 1):
        if sizes[k] > maxw:
            maxw = sizes[k]
    partial = np.zeros((max(nchunks, 1), P))
    gx = np.empty((n, m))
    if n == 0:
        return partial.sum(axis=0), gx
    go = np.zeros((n, p)) if g_out is None else np.ascontiguousarray(g_out, dtype=np.float64)
    gj = np.ascontiguousarray(g_jac, dtype=np.float64) if second else np.zeros((1, 1, 1))
    cdef double[:, ::1] gov = go
    cdef double[:, :, ::1] gjv = gj
    cdef double* gjp = &gjv[0, 0, 0]
    cdef double[:, ::1] pv = partial
    cdef double[:, ::1] gxv = gx
    scratch = np.empty((nchunks, CHUNK * p))
    cdef double[:, ::1] sv = scratch
    cdef Work* w
    with nogil, parallel():
        w = _alloc(nl, maxw, m)
        for c in prange(nchunks, schedule="static"):
            r0 = c * CHUNK
            R = n - r0
            if R > CHUNK:
                R = CHUNK
            _backward_chunk(&theta[0], &sizes[0], nl, m, maxw, &x[r0, 0], R, t, &gov[r0, 0],
                            (gjp + r0 * p * m) if second else gjp, second, w,
                            &pv[c, 0], &gxv[r0, 0], &sv[c, 0])
        _release(w)
    return partial.sum(axis=0), gx
