# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()

cdef double EPS_V = 1e-12
cdef double PSD_SHIFT = 1e-8


cdef inline Py_ssize_t store_row(Py_ssize_t j, Py_ssize_t K, Py_ssize_t stride) nogil:
    if j % stride == 0:
        return j // stride
    if j == K:
        return K // stride + 1
    return -1


cdef inline void means(double[::1] q, const double[:, ::1] r, const double[:, ::1] theta,
                       double[::1] rbar, double[::1] tbar,
                       Py_ssize_t d, Py_ssize_t p, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t i, j, a
    cdef double s
    for i in range(p):
        s = 0.0
        for a in range(d):
            s += r[i, a] * q[a]
        rbar[i] = s
    for j in range(m):
        s = 0.0
        for a in range(d):
            s += theta[j, a] * q[a]
        tbar[j] = s


cdef inline Py_ssize_t pop_update(double[::1] q, double[::1] qn,
                                  const double[:, ::1] r, const double[:, ::1] theta,
                                  double[::1] rbar, double[::1] tbar, double[::1] innov,
                                  unsigned char[::1] jumped, double dt,
                                  Py_ssize_t d, Py_ssize_t p, Py_ssize_t m,
                                  bint strict, bint* clipped) noexcept nogil:
    cdef Py_ssize_t a, i, j
    cdef double g, s, x, total
    for a in range(d):
        g = 0.0
        for i in range(p):
            g += (r[i, a] - rbar[i]) * innov[i]
        for j in range(m):
            g -= (theta[j, a] - tbar[j]) * dt
        qn[a] = q[a] + q[a] * g
    for j in range(m):
        if not jumped[j]:
            continue
        s = 0.0
        for a in range(d):
            s += theta[j, a] * qn[a]
        if s <= EPS_V or tbar[j] <= EPS_V:
            if strict:
                return j
            continue
        for a in range(d):
            qn[a] = theta[j, a] * qn[a] / s
    clipped[0] = False
    total = 0.0
    for a in range(d):
        x = qn[a]
        if x < 0.0:
            x = 0.0
            clipped[0] = True
        elif x > 1.0:
            x = 1.0
            clipped[0] = True
        qn[a] = x
        total += x
    for a in range(d):
        q[a] = qn[a] / total
    return -1


def qdiag_simulate(q0, const double[:, ::1] r, const double[:, ::1] theta,
                   const double[:, ::1] dW, const double[:, ::1] u, double dt, Py_ssize_t stride,
                   double[:, ::1] q_out, double[:, ::1] dy_out, unsigned char[:, ::1] jump_out):
    cdef Py_ssize_t d = len(q0)
    cdef Py_ssize_t p = r.shape[0]
    cdef Py_ssize_t m = theta.shape[0]
    cdef Py_ssize_t K = dW.shape[0] if p else u.shape[0]
    cdef double[::1] q = np.array(q0, dtype=np.float64)
    cdef double[::1] qn = np.empty(d)
    cdef double[::1] rbar = np.empty(max(p, 1))
    cdef double[::1] tbar = np.empty(max(m, 1))
    cdef double[::1] innov = np.empty(max(p, 1))
    cdef unsigned char[::1] jumped = np.zeros(max(m, 1), dtype=np.uint8)
    cdef Py_ssize_t k, i, j, a, row
    cdef double dy
    cdef bint clipped = False
    cdef long clips = 0
    with nogil:
        for a in range(d):
            q_out[0, a] = q[a]
        for k in range(K):
            means(q, r, theta, rbar, tbar, d, p, m)
            for i in range(p):
                dy = dW[k, i] + rbar[i] * dt
                dy_out[k, i] = dy
                innov[i] = dy - rbar[i] * dt
            for j in range(m):
                jumped[j] = tbar[j] > EPS_V and u[k, j] < tbar[j] * dt
                jump_out[k, j] = jumped[j]
            pop_update(q, qn, r, theta, rbar, tbar, innov, jumped, dt, d, p, m, False, &clipped)
            clips += clipped
            row = store_row(k + 1, K, stride)
            if row >= 0:
                for a in range(d):
                    q_out[row, a] = q[a]
    return clips


def qdiag_filter(q0, const double[:, ::1] r, const double[:, ::1] theta,
                 const double[:, ::1] dy, const unsigned char[:, ::1] jumps, double dt,
                 Py_ssize_t stride, double[:, ::1] q_out):
    cdef Py_ssize_t d = len(q0)
    cdef Py_ssize_t p = r.shape[0]
    cdef Py_ssize_t m = theta.shape[0]
    cdef Py_ssize_t K = dy.shape[0] if p else jumps.shape[0]
    cdef double[::1] q = np.array(q0, dtype=np.float64)
    cdef double[::1] qn = np.empty(d)
    cdef double[::1] rbar = np.empty(max(p, 1))
    cdef double[::1] tbar = np.empty(max(m, 1))
    cdef double[::1] innov = np.empty(max(p, 1))
    cdef unsigned char[::1] jumped = np.zeros(max(m, 1), dtype=np.uint8)
    cdef Py_ssize_t k, i, j, a, row, bad = -1, bad_step = -1
    cdef bint clipped = False
    cdef long clips = 0
    with nogil:
        for a in range(d):
            q_out[0, a] = q[a]
        for k in range(K):
            means(q, r, theta, rbar, tbar, d, p, m)
            for i in range(p):
                innov[i] = dy[k, i] - rbar[i] * dt
            for j in range(m):
                jumped[j] = jumps[k, j] != 0
            bad = pop_update(q, qn, r, theta, rbar, tbar, innov, jumped, dt, d, p, m, True, &clipped)
            if bad >= 0:
                bad_step = k
                break
            clips += clipped
            row = store_row(k + 1, K, stride)
            if row >= 0:
                for a in range(d):
                    q_out[row, a] = q[a]
    return clips, bad_step, bad


def doleans_logq(logq0, const double[:, ::1] r, const double[:, ::1] theta,
                 const double[:, ::1] dW, const unsigned char[:, ::1] jumps, double dt,
                 Py_ssize_t stride, double[:, ::1] out):
    cdef Py_ssize_t d = len(logq0)
    cdef Py_ssize_t p = r.shape[0]
    cdef Py_ssize_t m = theta.shape[0]
    cdef Py_ssize_t K = dW.shape[0] if p else jumps.shape[0]
    cdef double[::1] lq = np.array(logq0, dtype=np.float64)
    cdef double[::1] q = np.empty(d)
    cdef double[::1] rbar = np.empty(max(p, 1))
    cdef double[::1] tbar = np.empty(max(m, 1))
    cdef Py_ssize_t k, i, j, a, row
    cdef double inc, e, ta, mx, s, shift
    with nogil:
        for a in range(d):
            out[0, a] = lq[a]
        for k in range(K):
            for a in range(d):
                q[a] = exp(lq[a])
            means(q, r, theta, rbar, tbar, d, p, m)
            for a in range(d):
                if lq[a] == -INFINITY:
                    continue
                inc = 0.0
                for i in range(p):
                    e = r[i, a] - rbar[i]
                    inc += e * dW[k, i] - 0.5 * e * e * dt
                for j in range(m):
                    ta = theta[j, a]
                    if jumps[k, j]:
                        if ta == 0.0:
                            inc = -INFINITY
                            break
                        inc += log(ta / tbar[j])
                    inc -= (ta - tbar[j]) * dt
                lq[a] += inc
            mx = -INFINITY
            for a in range(d):
                if lq[a] > mx:
                    mx = lq[a]
            s = 0.0
            for a in range(d):
                if lq[a] != -INFINITY:
                    s += exp(lq[a] - mx)
            shift = mx + log(s)
            for a in range(d):
                if lq[a] != -INFINITY:
                    lq[a] -= shift
            row = store_row(k + 1, K, stride)
            if row >= 0:
                for a in range(d):
                    out[row, a] = lq[a]
    return 0


# --- full density matrix -------------------------------------------------

cdef inline void matmul(const double complex[:, ::1] A, const double complex[:, ::1] B,
                        double complex[:, ::1] out, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double complex s
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(d):
                s = s + A[i, k] * B[k, j]
            out[i, j] = s


cdef inline void matmul_dag(const double complex[:, ::1] A, const double complex[:, ::1] B,
                            double complex[:, ::1] out, Py_ssize_t d) noexcept nogil:
    # out = A @ B^dagger
    cdef Py_ssize_t i, j, k
    cdef double complex s
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(d):
                s = s + A[i, k] * B[j, k].conjugate()
            out[i, j] = s


cdef inline double trace_prod_re(const double complex[:, ::1] A, const double complex[:, ::1] B,
                                 Py_ssize_t d) noexcept nogil:
    # Re Tr[A @ B]
    cdef Py_ssize_t i, k
    cdef double s = 0.0
    for i in range(d):
        for k in range(d):
            s += (A[i, k] * B[k, i]).real
    return s


cdef bint psd_cholesky(const double complex[:, ::1] A, double complex[:, ::1] L,
                       Py_ssize_t d, double shift) noexcept nogil:
    # succeeds iff A + shift*I is positive definite (up to rounding)
    cdef Py_ssize_t i, j, k
    cdef double s
    cdef double complex z
    for j in range(d):
        s = A[j, j].real + shift
        for k in range(j):
            s -= L[j, k].real * L[j, k].real + L[j, k].imag * L[j, k].imag
        if s <= 0.0:
            return False
        L[j, j] = sqrt(s)
        for i in range(j + 1, d):
            z = A[i, j]
            for k in range(j):
                z = z - L[i, k] * L[j, k].conjugate()
            L[i, j] = z / L[j, j].real
    return True


def sme_steps(double complex[:, ::1] rho, const double complex[:, ::1] H,
              const double complex[:, :, ::1] C, const double complex[:, :, ::1] CdC,
              Py_ssize_t n_diff, const double[:, ::1] dW, const double[:, ::1] u,
              double dt, Py_ssize_t stride, Py_ssize_t k0,
              double[:, ::1] q_out, states_out, double[:, ::1] dy_out,
              unsigned char[:, ::1] jump_out):
    cdef Py_ssize_t n = C.shape[0]
    cdef Py_ssize_t m = n - n_diff
    cdef Py_ssize_t K = dW.shape[0] if n_diff else u.shape[0]
    cdef Py_ssize_t d = rho.shape[0]
    cdef double complex[:, ::1] new = np.empty((d, d), dtype=np.complex128)
    cdef double complex[:, ::1] t1 = np.empty((d, d), dtype=np.complex128)
    cdef double complex[:, ::1] t2 = np.empty((d, d), dtype=np.complex128)
    cdef double complex[:, ::1] Lc = np.empty((d, d), dtype=np.complex128)
    cdef double[::1] rbar = np.empty(max(n_diff, 1))
    cdef double[::1] v = np.empty(max(m, 1))
    cdef unsigned char[::1] jumped = np.zeros(max(m, 1), dtype=np.uint8)
    cdef bint keep_states = states_out is not None
    cdef double complex[:, :, ::1] st
    if keep_states:
        st = states_out
    cdef Py_ssize_t k, i, j, a, b, c, row
    cdef double dy, innov, s, tr
    cdef double complex z, mi = -1j
    with nogil:
        for k in range(k0, K):
            for i in range(n_diff):
                rbar[i] = 2.0 * trace_prod_re(C[i], rho, d)
            for j in range(m):
                v[j] = trace_prod_re(CdC[n_diff + j], rho, d)
            # -i[H, rho]
            matmul(H, rho, t1, d)
            matmul(rho, H, t2, d)
            for a in range(d):
                for b in range(d):
                    new[a, b] = mi * (t1[a, b] - t2[a, b])
            for i in range(n):
                matmul(C[i], rho, t1, d)
                matmul_dag(t1, C[i], t2, d)
                for a in range(d):
                    for b in range(d):
                        z = 0.0
                        for c in range(d):
                            z = z + CdC[i, a, c] * rho[c, b] + rho[a, c] * CdC[i, c, b]
                        new[a, b] = new[a, b] + t2[a, b] - 0.5 * z
            for a in range(d):
                for b in range(d):
                    new[a, b] = new[a, b] * dt
            for i in range(n_diff):
                dy = dW[k, i] + rbar[i] * dt
                dy_out[k, i] = dy
                innov = dy - rbar[i] * dt
                matmul(C[i], rho, t1, d)
                matmul_dag(rho, C[i], t2, d)
                for a in range(d):
                    for b in range(d):
                        new[a, b] = new[a, b] + (t1[a, b] + t2[a, b] - rbar[i] * rho[a, b]) * innov
            for j in range(m):
                matmul(C[n_diff + j], rho, t1, d)
                matmul_dag(t1, C[n_diff + j], t2, d)
                for a in range(d):
                    for b in range(d):
                        new[a, b] = new[a, b] - (t2[a, b] - v[j] * rho[a, b]) * dt
                jumped[j] = v[j] > EPS_V and u[k, j] < v[j] * dt
                jump_out[k, j] = jumped[j]
            for a in range(d):
                for b in range(d):
                    new[a, b] = new[a, b] + rho[a, b]
            for j in range(m):
                if jumped[j]:
                    s = trace_prod_re(CdC[n_diff + j], new, d)
                    if s > EPS_V:
                        matmul(C[n_diff + j], new, t1, d)
                        matmul_dag(t1, C[n_diff + j], new, d)
                        for a in range(d):
                            for b in range(d):
                                new[a, b] = new[a, b] / s
            tr = 0.0
            for a in range(d):
                tr += new[a, a].real
            for a in range(d):
                for b in range(d):
                    rho[a, b] = 0.5 * (new[a, b] + new[b, a].conjugate()) / tr
            if not psd_cholesky(rho, Lc, d, PSD_SHIFT):
                with gil:
                    return k
            row = store_row(k + 1, K, stride)
            if row >= 0:
                for a in range(d):
                    q_out[row, a] = rho[a, a].real
                if keep_states:
                    for a in range(d):
                        for b in range(d):
                            st[row, a, b] = rho[a, b]
    return K
