# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

The recurrent matmuls go through scipy's BLAS bindings; gate nonlinearities
are fused into single passes over each time step.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) nogil:
    cdef double e = exp(-fabs(x))
    if x >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


cdef inline double _tanh(double x) nogil:
    # exp-based; libm tanh is several times slower here
    cdef double e = exp(-2.0 * fabs(x))
    cdef double r = (1.0 - e) / (1.0 + e)
    return r if x >= 0 else -r


def lstm_forward(const double[:, :, ::1] xw, const double[:, ::1] wh):
    cdef Py_ssize_t B = xw.shape[0], T = xw.shape[1], G = xw.shape[2]
    cdef Py_ssize_t H = G // 4
    if wh.shape[0] != G or wh.shape[1] != H:
        raise ValueError("recurrent weight must be (4H, H)")
    gates_a = np.empty((B, T, G))
    h_a = np.empty((B, T, H))
    c_a = np.empty((B, T, H))
    tc_a = np.empty((B, T, H))
    cdef double[:, :, ::1] gates = gates_a
    cdef double[:, :, ::1] h = h_a
    cdef double[:, :, ::1] c = c_a
    cdef double[:, :, ::1] tc = tc_a
    cdef double[:, ::1] z = np.empty((B, G))
    cdef double[:, ::1] hp = np.zeros((B, H))
    cdef double[:, ::1] cp = np.zeros((B, H))
    cdef Py_ssize_t t, b, k
    cdef char ta = b'T', tb = b'N'
    cdef int m = <int>G, n = <int>B, kk = <int>H, lda = <int>H, ldb = <int>H, ldc = <int>G
    cdef double one = 1.0
    cdef double f, ig, o, g, cv, tv
    with nogil:
        for t in range(T):
            for b in range(B):
                for k in range(G):
                    z[b, k] = xw[b, t, k]
            if H > 0 and B > 0:
                dgemm(&ta, &tb, &m, &n, &kk, &one, &wh[0, 0], &lda, &hp[0, 0], &ldb, &one, &z[0, 0], &ldc)
            for b in range(B):
                for k in range(H):
                    f = _sig(z[b, k])
                    ig = _sig(z[b, H + k])
                    o = _sig(z[b, 2 * H + k])
                    g = _tanh(z[b, 3 * H + k])
                    cv = f * cp[b, k] + ig * g
                    tv = _tanh(cv)
                    cp[b, k] = cv
                    hp[b, k] = o * tv
                    gates[b, t, k] = f
                    gates[b, t, H + k] = ig
                    gates[b, t, 2 * H + k] = o
                    gates[b, t, 3 * H + k] = g
                    c[b, t, k] = cv
                    tc[b, t, k] = tv
                    h[b, t, k] = o * tv
    return h_a, gates_a, c_a, tc_a


def lstm_backward(const double[:, :, ::1] dh_seq, const double[:, :, ::1] gates, const double[:, :, ::1] c,
                  const double[:, :, ::1] tc, const double[:, :, ::1] h, const double[:, ::1] wh):
    cdef Py_ssize_t B = gates.shape[0], T = gates.shape[1], G = gates.shape[2]
    cdef Py_ssize_t H = G // 4
    dz_a = np.empty((B, T, G))
    dwh_a = np.zeros((G, H))
    cdef double[:, :, ::1] dz = dz_a
    cdef double[:, ::1] dwh = dwh_a
    cdef double[:, ::1] dzt = np.empty((B, G))
    cdef double[:, ::1] dh_next = np.zeros((B, H))
    cdef double[:, ::1] dc_next = np.zeros((B, H))
    cdef double[:, ::1] h_prev = np.zeros((B, H))
    cdef Py_ssize_t t, b, k
    cdef double f, ig, o, g, tv, cprev, dh, do, dc
    cdef char nn = b'N', tt = b'T'
    cdef int iH = <int>H, iB = <int>B, iG = <int>G
    cdef double one = 1.0, zero = 0.0
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for k in range(H):
                    f = gates[b, t, k]
                    ig = gates[b, t, H + k]
                    o = gates[b, t, 2 * H + k]
                    g = gates[b, t, 3 * H + k]
                    tv = tc[b, t, k]
                    if t > 0:
                        cprev = c[b, t - 1, k]
                        h_prev[b, k] = h[b, t - 1, k]
                    else:
                        cprev = 0.0
                        h_prev[b, k] = 0.0
                    dh = dh_seq[b, t, k] + dh_next[b, k]
                    do = dh * tv
                    dc = dc_next[b, k] + dh * o * (1.0 - tv * tv)
                    dzt[b, k] = dc * cprev * f * (1.0 - f)
                    dzt[b, H + k] = dc * g * ig * (1.0 - ig)
                    dzt[b, 2 * H + k] = do * o * (1.0 - o)
                    dzt[b, 3 * H + k] = dc * ig * (1.0 - g * g)
                    dc_next[b, k] = dc * f
                for k in range(G):
                    dz[b, t, k] = dzt[b, k]
            # dh_next (B,H) = dzt (B,4H) @ wh (4H,H)
            dgemm(&nn, &nn, &iH, &iB, &iG, &one, &wh[0, 0], &iH, &dzt[0, 0], &iG, &zero, &dh_next[0, 0], &iH)
            # dwh (4H,H) += dzt^T (4H,B) @ h_prev (B,H)
            dgemm(&nn, &tt, &iH, &iG, &iB, &one, &h_prev[0, 0], &iH, &dzt[0, 0], &iG, &one, &dwh[0, 0], &iH)
    return dz_a, dwh_a


def bucket_pool_mask(const cnp.int64_t[:, ::1] codes, Py_ssize_t n_buckets):
    cdef Py_ssize_t R = codes.shape[0], L = codes.shape[1]
    mask_a = np.zeros((L, L), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = mask_a
    cdef cnp.int64_t[::1] counts = np.zeros(n_buckets + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] order = np.empty(L, dtype=np.int64)
    cdef cnp.int64_t[::1] fill = np.empty(n_buckets, dtype=np.int64)
    cdef Py_ssize_t r, i, a, bb, lo, hi, bk
    cdef long long entries = 0, size
    with nogil:
        for r in range(R):
            for bk in range(n_buckets + 1):
                counts[bk] = 0
            for i in range(L):
                counts[codes[r, i] + 1] += 1
            for bk in range(n_buckets):
                size = counts[bk + 1]
                entries += size * size
                counts[bk + 1] += counts[bk]
                fill[bk] = counts[bk]
            # counting sort of positions by bucket
            for i in range(L):
                bk = codes[r, i]
                order[fill[bk]] = i
                fill[bk] += 1
            for bk in range(n_buckets):
                lo = counts[bk]
                hi = counts[bk + 1]
                for a in range(lo, hi):
                    for bb in range(lo, hi):
                        mask[order[a], order[bb]] = 1
    return mask_a.view(np.bool_), int(entries)
