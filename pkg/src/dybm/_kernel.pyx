# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-step DyBM kernels.

Same contract as ``dybm._kernel_py.run_sequence``: arrays are mutated in
place, per-step NLL is written to ``step_nll`` and the Adam step counter is
returned.
"""

from libc.math cimport exp, log, log1p, sqrt, isfinite, pow

cdef double PROB_FLOOR = 1e-12


cdef inline double _sigmoid(double z) nogil:
    cdef double ez
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    ez = exp(z)
    return ez / (1.0 + ez)


cdef void _adam(double* param, const double* grad, double* m1, double* m2,
                Py_ssize_t size, double step_size, double b1, double b2,
                double eps_hat) noexcept nogil:
    cdef Py_ssize_t q
    cdef double g
    for q in range(size):
        g = grad[q]
        m1[q] = b1 * m1[q] + (1.0 - b1) * g
        m2[q] = b2 * m2[q] + (1.0 - b2) * (g * g)
        param[q] += step_size * m1[q] / (sqrt(m2[q]) + eps_hat)


def run_sequence(double[::1] bias, double[:, :, ::1] u, double[:, :, ::1] v,
                 const long long[:, ::1] delays, double[:, :, ::1] queue,
                 double[:, :, ::1] alpha, double[:, ::1] gamma, double[:, :, ::1] beta,
                 const double[::1] lam, const double[::1] mu,
                 const double[:, ::1] seq, const double[::1] unit_scale,
                 const double[:, ::1] edge_scale, double[::1] step_nll,
                 bint learn=False, adam=None, long long step=0,
                 double lr=0.0, double b1=0.9, double b2=0.999, double eps=1e-8):
    cdef Py_ssize_t n = bias.shape[0]
    cdef Py_ssize_t n_k = lam.shape[0]
    cdef Py_ssize_t n_l = mu.shape[0]
    cdef Py_ssize_t depth = queue.shape[2]
    cdef Py_ssize_t n_t = seq.shape[0]
    cdef Py_ssize_t t, i, j, k, l, m
    cdef long long d
    cdef double acc, w, pc, ej, ei, xi, arriving, bc1, bc2, step_size, eps_hat
    cdef double total
    cdef double[::1] z = None
    cdef double[::1] p = None
    cdef double[:, ::1] mu_pow = None
    cdef double[::1] m_b = None
    cdef double[::1] s_b = None
    cdef double[:, :, ::1] m_u = None
    cdef double[:, :, ::1] s_u = None
    cdef double[:, :, ::1] m_v = None
    cdef double[:, :, ::1] s_v = None
    cdef double[::1] g_b = None
    cdef double[:, :, ::1] g_u = None
    cdef double[:, :, ::1] g_v = None

    import numpy as np
    z = np.empty(n, dtype=np.float64)
    p = np.empty(n, dtype=np.float64)
    mu_pow = np.empty((depth, n_l), dtype=np.float64)
    for m in range(depth):
        for l in range(n_l):
            mu_pow[m, l] = pow(mu[l], <double>(m + 1))
    if learn:
        m_b, s_b, m_u, s_u, m_v, s_v = adam
        g_b = np.empty(n, dtype=np.float64)
        g_u = np.empty((n, n, n_k), dtype=np.float64)
        g_v = np.empty((n, n, n_l), dtype=np.float64)

    for t in range(n_t):
        # activations
        for j in range(n):
            z[j] = bias[j]
        for i in range(n):
            for j in range(n):
                w = edge_scale[i, j] * unit_scale[i]
                acc = 0.0
                for k in range(n_k):
                    acc += u[i, j, k] * alpha[i, j, k]
                for l in range(n_l):
                    acc -= v[i, j, l] * beta[i, j, l]
                z[j] += w * acc
        for j in range(n):
            for i in range(n):
                acc = 0.0
                for l in range(n_l):
                    acc += v[j, i, l] * gamma[i, l]
                z[j] -= edge_scale[j, i] * unit_scale[i] * acc
        total = 0.0
        for j in range(n):
            if not isfinite(z[j]):
                raise FloatingPointError(
                    f"non-finite activation at step {t}: unit {j}, z = {z[j]}")
            p[j] = _sigmoid(z[j])
            pc = p[j]
            if pc < PROB_FLOOR:
                pc = PROB_FLOOR
            elif pc > 1.0 - PROB_FLOOR:
                pc = 1.0 - PROB_FLOOR
            total -= seq[t, j] * log(pc) + (1.0 - seq[t, j]) * log1p(-pc)
        step_nll[t] = total

        # Adam ascent on log P(x_t | history), traces still hold history < t
        if learn:
            step += 1
            bc1 = 1.0 - pow(b1, <double>step)
            bc2 = 1.0 - pow(b2, <double>step)
            step_size = lr * sqrt(bc2) / bc1
            eps_hat = eps * sqrt(bc2)
            for j in range(n):
                g_b[j] = seq[t, j] - p[j]
            for i in range(n):
                ei = seq[t, i] - p[i]
                for j in range(n):
                    ej = seq[t, j] - p[j]
                    w = edge_scale[i, j] * unit_scale[i]
                    for k in range(n_k):
                        g_u[i, j, k] = (w * ej) * alpha[i, j, k]
                    for l in range(n_l):
                        g_v[i, j, l] = (-(w * ej) * beta[i, j, l]
                                        - (edge_scale[i, j] * unit_scale[j] * ei) * gamma[j, l])
            _adam(&bias[0], &g_b[0], &m_b[0], &s_b[0], n, step_size, b1, b2, eps_hat)
            _adam(&u[0, 0, 0], &g_u[0, 0, 0], &m_u[0, 0, 0], &s_u[0, 0, 0],
                  n * n * n_k, step_size, b1, b2, eps_hat)
            _adam(&v[0, 0, 0], &g_v[0, 0, 0], &m_v[0, 0, 0], &s_v[0, 0, 0],
                  n * n * n_l, step_size, b1, b2, eps_hat)

        # advance traces and queues
        for j in range(n):
            for l in range(n_l):
                gamma[j, l] = mu[l] * (gamma[j, l] + seq[t, j])
        for i in range(n):
            xi = seq[t, i]
            for j in range(n):
                d = delays[i, j]
                if d == 1:
                    arriving = xi
                else:
                    arriving = queue[i, j, d - 2]
                for k in range(n_k):
                    alpha[i, j, k] = lam[k] * (alpha[i, j, k] + arriving)
                for m in range(d - 2, 0, -1):
                    queue[i, j, m] = queue[i, j, m - 1]
                if d > 1:
                    queue[i, j, 0] = xi
                for l in range(n_l):
                    acc = 0.0
                    for m in range(d - 1):
                        acc += mu_pow[m, l] * queue[i, j, m]
                    beta[i, j, l] = acc
    return step
