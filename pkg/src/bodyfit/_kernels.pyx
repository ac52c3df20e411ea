# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; see ``bodyfit._kernels_py`` for the reference versions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, exp

cnp.import_array()

DEF SMALL_ANGLE = 1e-8


cdef inline void _skew(double x, double y, double z, double[:, ::1] out) noexcept nogil:
    out[0, 0] = 0.0
    out[0, 1] = -z
    out[0, 2] = y
    out[1, 0] = z
    out[1, 1] = 0.0
    out[1, 2] = -x
    out[2, 0] = -y
    out[2, 1] = x
    out[2, 2] = 0.0


cdef inline void _matmul3(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    cdef int r, c
    for r in range(3):
        for c in range(3):
            out[r, c] = a[r, 0] * b[0, c] + a[r, 1] * b[1, c] + a[r, 2] * b[2, c]


def rodrigues_batch(v):
    cdef double[:, ::1] vv = np.ascontiguousarray(v, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = vv.shape[0]
    R_arr = np.empty((n, 3, 3))
    dR_arr = np.empty((n, 3, 3, 3))
    cdef double[:, :, ::1] R = R_arr
    cdef double[:, :, :, ::1] dR = dR_arr
    cdef double[:, ::1] K = np.empty((3, 3))
    cdef double[:, ::1] K2 = np.empty((3, 3))
    cdef double[:, ::1] Ei = np.empty((3, 3))
    cdef double[:, ::1] T1 = np.empty((3, 3))
    cdef double[:, ::1] T2 = np.empty((3, 3))
    cdef double[:, ::1] Rk = np.empty((3, 3))
    cdef double[3] w
    cdef double[3] col
    cdef Py_ssize_t k
    cdef int i, r, c
    cdef double x, y, z, th2, th, s, co, a, b
    for k in range(n):
        x = vv[k, 0]
        y = vv[k, 1]
        z = vv[k, 2]
        th2 = x * x + y * y + z * z
        th = sqrt(th2)
        _skew(x, y, z, K)
        _matmul3(K, K, K2)
        if th < SMALL_ANGLE:
            for r in range(3):
                for c in range(3):
                    R[k, r, c] = (1.0 if r == c else 0.0) + K[r, c] + 0.5 * K2[r, c]
            for i in range(3):
                _skew(1.0 if i == 0 else 0.0, 1.0 if i == 1 else 0.0, 1.0 if i == 2 else 0.0, Ei)
                _matmul3(Ei, K, T1)
                _matmul3(K, Ei, T2)
                for r in range(3):
                    for c in range(3):
                        dR[k, i, r, c] = Ei[r, c] + 0.5 * (T1[r, c] + T2[r, c])
            continue
        s = sin(th)
        co = cos(th)
        a = s / th
        b = (1.0 - co) / th2
        for r in range(3):
            for c in range(3):
                Rk[r, c] = (1.0 if r == c else 0.0) + a * K[r, c] + b * K2[r, c]
                R[k, r, c] = Rk[r, c]
        for i in range(3):
            # column i of (I - R)
            for r in range(3):
                col[r] = (1.0 if r == i else 0.0) - Rk[r, i]
            w[0] = y * col[2] - z * col[1]
            w[1] = z * col[0] - x * col[2]
            w[2] = x * col[1] - y * col[0]
            _skew(w[0], w[1], w[2], T1)
            for r in range(3):
                for c in range(3):
                    T1[r, c] = (vv[k, i] * K[r, c] + T1[r, c]) / th2
            _matmul3(T1, Rk, T2)
            for r in range(3):
                for c in range(3):
                    dR[k, i, r, c] = T2[r, c]
    return R_arr, dR_arr


def forward_chain(parents, R_local, joints):
    cdef cnp.int64_t[::1] par = np.ascontiguousarray(parents, dtype=np.int64)
    cdef double[:, :, ::1] Rl = np.ascontiguousarray(R_local, dtype=np.float64)
    cdef double[:, ::1] J = np.ascontiguousarray(joints, dtype=np.float64)
    cdef Py_ssize_t K = par.shape[0]
    Rw_arr = np.empty((K, 3, 3))
    tw_arr = np.empty((K, 3))
    cdef double[:, :, ::1] Rw = Rw_arr
    cdef double[:, ::1] tw = tw_arr
    cdef double[3] tk
    cdef Py_ssize_t k, p
    cdef int r, c
    with nogil:
        for k in range(K):
            for r in range(3):
                tk[r] = J[k, r] - (Rl[k, r, 0] * J[k, 0] + Rl[k, r, 1] * J[k, 1] + Rl[k, r, 2] * J[k, 2])
            p = par[k]
            if p < 0:
                for r in range(3):
                    tw[k, r] = tk[r]
                    for c in range(3):
                        Rw[k, r, c] = Rl[k, r, c]
            else:
                for r in range(3):
                    tw[k, r] = Rw[p, r, 0] * tk[0] + Rw[p, r, 1] * tk[1] + Rw[p, r, 2] * tk[2] + tw[p, r]
                    for c in range(3):
                        Rw[k, r, c] = Rw[p, r, 0] * Rl[k, 0, c] + Rw[p, r, 1] * Rl[k, 1, c] + Rw[p, r, 2] * Rl[k, 2, c]
    return Rw_arr, tw_arr


def point_jacobian(points, part_of, ancestors, parents, Rw, tw, R_local, dR, joints):
    cdef double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef cnp.int64_t[::1] own = np.ascontiguousarray(part_of, dtype=np.int64)
    cdef cnp.uint8_t[:, ::1] anc = np.ascontiguousarray(ancestors, dtype=np.uint8)
    cdef cnp.int64_t[::1] par = np.ascontiguousarray(parents, dtype=np.int64)
    cdef double[:, :, ::1] RW = np.ascontiguousarray(Rw, dtype=np.float64)
    cdef double[:, ::1] TW = np.ascontiguousarray(tw, dtype=np.float64)
    cdef double[:, :, ::1] RL = np.ascontiguousarray(R_local, dtype=np.float64)
    cdef double[:, :, :, ::1] DR = np.ascontiguousarray(dR, dtype=np.float64)
    cdef double[:, ::1] J = np.ascontiguousarray(joints, dtype=np.float64)
    cdef Py_ssize_t M = P.shape[0]
    cdef Py_ssize_t K = par.shape[0]
    out_arr = np.zeros((M, 3, 3 * K))
    cdef double[:, :, ::1] out = out_arr
    # AD[k, i] = A_k.R @ dR[k, i]
    AD_arr = np.empty((K, 3, 3, 3))
    cdef double[:, :, :, ::1] AD = AD_arr
    cdef Py_ssize_t m, k, p, pk
    cdef int i, r, c
    cdef double[3] d
    cdef double[3] wv
    cdef double[3] u
    cdef double s
    with nogil:
        for k in range(K):
            p = par[k]
            for i in range(3):
                for r in range(3):
                    for c in range(3):
                        if p < 0:
                            AD[k, i, r, c] = DR[k, i, r, c]
                        else:
                            AD[k, i, r, c] = (RW[p, r, 0] * DR[k, i, 0, c] + RW[p, r, 1] * DR[k, i, 1, c]
                                              + RW[p, r, 2] * DR[k, i, 2, c])
        for m in range(M):
            pk = own[m]
            for k in range(K):
                if not anc[pk, k]:
                    continue
                p = par[k]
                if p < 0:
                    for r in range(3):
                        wv[r] = P[m, r] - J[k, r]
                else:
                    for r in range(3):
                        d[r] = P[m, r] - TW[p, r]
                    for c in range(3):
                        wv[c] = RW[p, 0, c] * d[0] + RW[p, 1, c] * d[1] + RW[p, 2, c] * d[2] - J[k, c]
                for c in range(3):
                    u[c] = RL[k, 0, c] * wv[0] + RL[k, 1, c] * wv[1] + RL[k, 2, c] * wv[2]
                for i in range(3):
                    for r in range(3):
                        out[m, r, 3 * k + i] = AD[k, i, r, 0] * u[0] + AD[k, i, r, 1] * u[1] + AD[k, i, r, 2] * u[2]
    return out_arr


def overlap_residuals(centers, sigma2, pairs, jac):
    cdef double[:, ::1] C = np.ascontiguousarray(centers, dtype=np.float64)
    cdef double[::1] S2 = np.ascontiguousarray(sigma2, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] pr = np.ascontiguousarray(pairs, dtype=np.int64)
    cdef double[:, :, ::1] JC = np.ascontiguousarray(jac, dtype=np.float64)
    cdef Py_ssize_t E = pr.shape[0]
    cdef Py_ssize_t NP = JC.shape[2]
    r_arr = np.empty(E)
    J_arr = np.zeros((E, NP))
    cdef double[::1] res = r_arr
    cdef double[:, ::1] Jr = J_arr
    cdef Py_ssize_t e, a, b, q
    cdef int c
    cdef double dx, dy, dz, s, d2, rv, k0, k1, k2
    with nogil:
        for e in range(E):
            a = pr[e, 0]
            b = pr[e, 1]
            dx = C[a, 0] - C[b, 0]
            dy = C[a, 1] - C[b, 1]
            dz = C[a, 2] - C[b, 2]
            s = S2[a] + S2[b]
            d2 = dx * dx + dy * dy + dz * dz
            rv = exp(-0.5 * d2 / s)
            res[e] = rv
            if rv < 1e-300:
                continue
            k0 = -rv / s * dx
            k1 = -rv / s * dy
            k2 = -rv / s * dz
            for q in range(NP):
                Jr[e, q] = (k0 * (JC[a, 0, q] - JC[b, 0, q]) + k1 * (JC[a, 1, q] - JC[b, 1, q])
                            + k2 * (JC[a, 2, q] - JC[b, 2, q]))
    return r_arr, J_arr
