# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused GRU sequence kernel.

Same contract as ``gru_numpy``: the time loop, gate nonlinearities and the
masked state update run in C, recurrent matrix products go through BLAS.
Input projections are expected precomputed, shape (T, B, H).
"""

import numpy as np

from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

cdef char _CN = 78  # 'N'
cdef char _CT = 84  # 'T'


cdef void _mm_nn(double* a, double* b, double* c, int m, int n, int k, double beta) nogil:
    # row-major C (m,n) = A (m,k) @ B (k,n) + beta * C
    cdef double alpha = 1.0
    dgemm(&_CN, &_CN, &n, &m, &k, &alpha, b, &n, a, &k, &beta, c, &n)


cdef void _mm_tn(double* a, double* b, double* c, int kk, int m, int n) nogil:
    # row-major C (m,n) += A (kk,m)^T @ B (kk,n)
    cdef double alpha = 1.0
    cdef double beta = 1.0
    dgemm(&_CN, &_CT, &n, &m, &kk, &alpha, b, &n, a, &m, &beta, c, &n)


cdef void _mm_nt(double* g, double* u, double* c, int m, int n, int k, double beta) nogil:
    # row-major C (m,n) = G (m,k) @ U (n,k)^T + beta * C
    cdef double alpha = 1.0
    dgemm(&_CT, &_CN, &n, &m, &k, &alpha, u, &k, g, &k, &beta, c, &n)


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def gru_forward(xz, xr, xh, h0, uz, ur, uh, mask):
    """Run the recurrence; returns (hs, (z, r, ht)) with hs[t] = state after step t."""
    cdef double[:, :, ::1] xz_v = np.ascontiguousarray(xz, dtype=np.float64)
    cdef double[:, :, ::1] xr_v = np.ascontiguousarray(xr, dtype=np.float64)
    cdef double[:, :, ::1] xh_v = np.ascontiguousarray(xh, dtype=np.float64)
    cdef double[:, ::1] uz_v = np.ascontiguousarray(uz, dtype=np.float64)
    cdef double[:, ::1] ur_v = np.ascontiguousarray(ur, dtype=np.float64)
    cdef double[:, ::1] uh_v = np.ascontiguousarray(uh, dtype=np.float64)
    cdef double[:, ::1] mask_v = np.ascontiguousarray(mask, dtype=np.float64)
    cdef int T = xz_v.shape[0]
    cdef int B = xz_v.shape[1]
    cdef int H = xz_v.shape[2]

    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    hts = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    cdef double[:, :, ::1] zs_v = zs
    cdef double[:, :, ::1] rs_v = rs
    cdef double[:, :, ::1] hts_v = hts
    cdef double[:, :, ::1] hs_v = hs

    cdef double[:, ::1] h = np.ascontiguousarray(h0, dtype=np.float64).copy()
    cdef double[:, ::1] az = np.empty((B, H))
    cdef double[:, ::1] ar = np.empty((B, H))
    cdef double[:, ::1] ah = np.empty((B, H))
    cdef double[:, ::1] rh = np.empty((B, H))

    cdef int t, b, j
    cdef double zv, rv, htv, m
    for t in range(T):
        az[:, :] = xz_v[t]
        ar[:, :] = xr_v[t]
        ah[:, :] = xh_v[t]
        _mm_nn(&h[0, 0], &uz_v[0, 0], &az[0, 0], B, H, H, 1.0)
        _mm_nn(&h[0, 0], &ur_v[0, 0], &ar[0, 0], B, H, H, 1.0)
        for b in range(B):
            for j in range(H):
                zv = _sigmoid(az[b, j])
                rv = _sigmoid(ar[b, j])
                zs_v[t, b, j] = zv
                rs_v[t, b, j] = rv
                rh[b, j] = rv * h[b, j]
        _mm_nn(&rh[0, 0], &uh_v[0, 0], &ah[0, 0], B, H, H, 1.0)
        for b in range(B):
            m = mask_v[t, b]
            for j in range(H):
                htv = tanh(ah[b, j])
                hts_v[t, b, j] = htv
                zv = zs_v[t, b, j]
                htv = m * ((1.0 - zv) * h[b, j] + zv * htv) + (1.0 - m) * h[b, j]
                h[b, j] = htv
                hs_v[t, b, j] = htv
    return hs, (zs, rs, hts)


def gru_backward(dh_all, hs, zs, rs, hts, h0, uz, ur, uh, mask):
    """Gradient of the recurrence; returns (dxz, dxr, dxh, dh0, duz, dur, duh)."""
    cdef double[:, :, ::1] g_v = np.ascontiguousarray(dh_all, dtype=np.float64)
    cdef double[:, :, ::1] hs_v = np.ascontiguousarray(hs, dtype=np.float64)
    cdef double[:, :, ::1] zs_v = np.ascontiguousarray(zs, dtype=np.float64)
    cdef double[:, :, ::1] rs_v = np.ascontiguousarray(rs, dtype=np.float64)
    cdef double[:, :, ::1] hts_v = np.ascontiguousarray(hts, dtype=np.float64)
    cdef double[:, ::1] h0_v = np.ascontiguousarray(h0, dtype=np.float64)
    cdef double[:, ::1] uz_v = np.ascontiguousarray(uz, dtype=np.float64)
    cdef double[:, ::1] ur_v = np.ascontiguousarray(ur, dtype=np.float64)
    cdef double[:, ::1] uh_v = np.ascontiguousarray(uh, dtype=np.float64)
    cdef double[:, ::1] mask_v = np.ascontiguousarray(mask, dtype=np.float64)
    cdef int T = g_v.shape[0]
    cdef int B = g_v.shape[1]
    cdef int H = g_v.shape[2]

    dxz = np.empty((T, B, H))
    dxr = np.empty((T, B, H))
    dxh = np.empty((T, B, H))
    duz = np.zeros((H, H))
    dur = np.zeros((H, H))
    duh = np.zeros((H, H))
    dh = np.zeros((B, H))
    cdef double[:, :, ::1] dxz_v = dxz
    cdef double[:, :, ::1] dxr_v = dxr
    cdef double[:, :, ::1] dxh_v = dxh
    cdef double[:, ::1] duz_v = duz
    cdef double[:, ::1] dur_v = dur
    cdef double[:, ::1] duh_v = duh
    cdef double[:, ::1] dh_v = dh
    cdef double[:, ::1] rh = np.empty((B, H))
    cdef double[:, ::1] drh = np.empty((B, H))

    cdef int t, b, j
    cdef double gg, gc, m, zv, rv, htv, hp, dz, dht, dah, daz, dr, dar
    cdef double* hp_ptr
    for t in range(T - 1, -1, -1):
        if t > 0:
            hp_ptr = &hs_v[t - 1, 0, 0]
        else:
            hp_ptr = &h0_v[0, 0]
        for b in range(B):
            m = mask_v[t, b]
            for j in range(H):
                gg = g_v[t, b, j] + dh_v[b, j]
                gc = gg * m
                zv = zs_v[t, b, j]
                rv = rs_v[t, b, j]
                htv = hts_v[t, b, j]
                hp = hp_ptr[b * H + j]
                dz = gc * (htv - hp)
                dht = gc * zv
                dh_v[b, j] = gg * (1.0 - m) + gc * (1.0 - zv)
                dah = dht * (1.0 - htv * htv)
                dxh_v[t, b, j] = dah
                rh[b, j] = rv * hp
                daz = dz * zv * (1.0 - zv)
                dxz_v[t, b, j] = daz
        _mm_tn(&rh[0, 0], &dxh_v[t, 0, 0], &duh_v[0, 0], B, H, H)
        _mm_nt(&dxh_v[t, 0, 0], &uh_v[0, 0], &drh[0, 0], B, H, H, 0.0)
        for b in range(B):
            for j in range(H):
                hp = hp_ptr[b * H + j]
                rv = rs_v[t, b, j]
                dh_v[b, j] += drh[b, j] * rv
                dr = drh[b, j] * hp
                dar = dr * rv * (1.0 - rv)
                dxr_v[t, b, j] = dar
        _mm_tn(hp_ptr, &dxz_v[t, 0, 0], &duz_v[0, 0], B, H, H)
        _mm_tn(hp_ptr, &dxr_v[t, 0, 0], &dur_v[0, 0], B, H, H)
        _mm_nt(&dxz_v[t, 0, 0], &uz_v[0, 0], &dh_v[0, 0], B, H, H, 1.0)
        _mm_nt(&dxr_v[t, 0, 0], &ur_v[0, 0], &dh_v[0, 0], B, H, H, 1.0)
    return dxz, dxr, dxh, dh, duz, dur, duh
