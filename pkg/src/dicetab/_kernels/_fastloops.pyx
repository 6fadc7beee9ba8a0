# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled backend for the per-state fixed-point kernel.

Operation-for-operation mirror of reference.py (same accumulation order,
same bracket growth, same bisection stopping rule); see that module for the
algorithm description. Kept in lockstep deliberately: the parity test in
tests/test_backends.py compares the two at tight tolerance.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, fabs, log

from .reference import KernelError

cnp.import_array()

BACKEND_NAME = "compiled"

cdef double EXP_CLAMP = 500.0


cdef inline double _phi(int gen_id, double y) noexcept nogil:
    cdef double z
    if gen_id == 0:  # chi2
        z = y + 1.0
        return z if z > 0.0 else 0.0
    if gen_id == 1:  # sql_chi2
        z = 0.5 * (y + 1.0)
        return z if z > 0.0 else 0.0
    if gen_id == 2:  # kl
        z = y - 1.0
        if z > EXP_CLAMP:
            z = EXP_CLAMP
        elif z < -EXP_CLAMP:
            z = -EXP_CLAMP
        return exp(z)
    # soft_chi2
    if y >= 0.0:
        return y + 1.0
    z = y
    if z < -EXP_CLAMP:
        z = -EXP_CLAMP
    return exp(z)


cdef inline double _resid(const double[:, ::1] q, const double[:, ::1] pi,
                          Py_ssize_t s, double nu, int mode, int gen_id,
                          double alpha, double target) noexcept nogil:
    cdef double acc = -target
    cdef double w, y
    cdef Py_ssize_t a
    for a in range(q.shape[1]):
        if mode == 0:
            w = _phi(gen_id, (q[s, a] - nu) / alpha)
        elif mode == 1:
            w = _phi(gen_id, q[s, a] - nu)
        else:
            y = 1.0 + (q[s, a] - nu) / (2.0 * alpha)
            w = y if y > 0.0 else 0.0
        acc = acc + pi[s, a] * w
    return acc


def semi_fixed_point(transition_hat, pi_d, reward, support_mask, double gamma,
                     int mode, int gen_id, double alpha, double target,
                     double tol, int max_sweeps, double bisect_tol,
                     double damping, nu0):
    mask_np = np.asarray(support_mask, dtype=bool)
    t_np = np.asarray(transition_hat, dtype=np.float64)
    t2_np = np.ascontiguousarray(t_np.reshape(-1, t_np.shape[2]))
    pi_np = np.ascontiguousarray(np.where(mask_np, np.asarray(pi_d, np.float64), 0.0))
    r_np = np.ascontiguousarray(np.asarray(reward, dtype=np.float64))
    rows_np = np.flatnonzero(mask_np.any(axis=1)).astype(np.int64)
    nu_arr = np.array(nu0, dtype=np.float64, copy=True)

    cdef Py_ssize_t n_states = r_np.shape[0]
    cdef Py_ssize_t n_actions = r_np.shape[1]
    cdef Py_ssize_t n_rows = rows_np.shape[0]

    q_arr = np.zeros((n_states, n_actions))
    roots_np = np.zeros(n_rows)

    cdef const double[:, ::1] t2 = t2_np
    cdef const double[:, ::1] pi = pi_np
    cdef const double[:, ::1] r = r_np
    cdef double[:, ::1] q = q_arr
    cdef double[:] nu = nu_arr
    cdef double[:] roots = roots_np
    cdef const long[:] rows = rows_np

    cdef double damp = damping
    cdef double prev_diff = INFINITY
    cdef double diff = INFINITY
    cdef int osc = 0
    cdef bint converged = False
    cdef int sweeps = 0
    cdef int fail_state = -1
    cdef int fail_side = 0

    cdef Py_ssize_t i, a, z, s, sweep, it
    cdef double acc, qlow, qhigh, scale, lo, hi, pad, mid, e, m

    scale = alpha if mode == 0 else (2.0 * alpha if mode == 2 else 1.0)

    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        # q = reward + gamma * T_hat @ nu, all pairs
        for s in range(n_states):
            for a in range(n_actions):
                acc = 0.0
                for z in range(n_states):
                    acc += t2[s * n_actions + a, z] * nu[z]
                q[s, a] = r[s, a] + gamma * acc

        for i in range(n_rows):
            s = rows[i]
            if mode == 3:  # xql closed form
                m = -INFINITY
                for a in range(n_actions):
                    if pi[s, a] > 0.0 and q[s, a] > m:
                        m = q[s, a]
                acc = 0.0
                for a in range(n_actions):
                    e = (q[s, a] - m) / alpha
                    if e > 0.0:
                        e = 0.0
                    elif e < -EXP_CLAMP:
                        e = -EXP_CLAMP
                    acc += pi[s, a] * exp(e)
                roots[i] = m + alpha * log(acc)
                continue

            qlow = INFINITY
            qhigh = -INFINITY
            for a in range(n_actions):
                if pi[s, a] > 0.0:
                    if q[s, a] < qlow:
                        qlow = q[s, a]
                    if q[s, a] > qhigh:
                        qhigh = q[s, a]
            lo = qlow - scale
            hi = qhigh

            pad = scale
            for it in range(64):
                if _resid(q, pi, s, lo, mode, gen_id, alpha, target) >= 0.0:
                    break
                lo -= pad
                pad *= 2.0
            else:
                fail_state = <int> s
                fail_side = -1
                break
            pad = scale
            for it in range(64):
                if _resid(q, pi, s, hi, mode, gen_id, alpha, target) <= 0.0:
                    break
                hi += pad
                pad *= 2.0
            else:
                fail_state = <int> s
                fail_side = 1
                break

            for it in range(200):
                if hi - lo <= bisect_tol:
                    break
                mid = 0.5 * (lo + hi)
                if _resid(q, pi, s, mid, mode, gen_id, alpha, target) >= 0.0:
                    lo = mid
                else:
                    hi = mid
            roots[i] = 0.5 * (lo + hi)

        if fail_state >= 0:
            side = "lower" if fail_side < 0 else "upper"
            raise KernelError(f"{side} bracket growth failed at state {fail_state}")

        diff = 0.0
        for i in range(n_rows):
            e = fabs(roots[i] - nu[rows[i]])
            if e > diff:
                diff = e
        if diff <= tol or sweep == max_sweeps:
            for i in range(n_rows):
                nu[rows[i]] = roots[i]
            converged = diff <= tol
            break
        for i in range(n_rows):
            nu[rows[i]] = nu[rows[i]] + damp * (roots[i] - nu[rows[i]])
        if diff > prev_diff * (1.0 + 1e-12):
            osc += 1
            if osc >= 8:
                damp = 0.5 * damp
                if damp < 1.0 / 64.0:
                    damp = 1.0 / 64.0
                osc = 0
        else:
            osc = 0
        prev_diff = diff

    return nu_arr, q_arr, sweeps, bool(converged), float(diff)
