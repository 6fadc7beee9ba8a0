"""Pure-numpy backend for the per-state fixed-point kernel.

This is the fallback used when the compiled extension is unavailable. Both
backends implement the same algorithm with the same branch structure (column
sequential accumulation, identical bracket growth, identical bisection
stopping rule) so their outputs agree to numerical noise.

The kernel iterates

    q  <- reward + gamma * T_hat @ nu
    nu(s) <- the unique root of  sum_a pi_D(a|s) * w_a(nu) = target

restricted to supported states; unsupported states keep their initial value.
The per-action weight w_a depends on the mode:

    mode 0:  w_a = phi_g((q_a - nu) / alpha)      scaled conjugate slope
    mode 1:  w_a = phi_g(q_a - nu)                unscaled conjugate slope
    mode 2:  w_a = max(0, 1 + (q_a - nu)/(2 alpha))
    mode 3:  closed form nu = alpha * log sum_a pi_D exp(q_a / alpha)

where phi_g = (f*0)' of the generator (0 chi2, 1 sql_chi2, 2 kl, 3 soft_chi2).
Every w_a is nondecreasing in q_a and nonincreasing in nu, so the per-state
residual is monotone and bisection is safe.

The final (nu, q) pair returned is always consistent: the last action is an
undamped exact root pass against the q computed from the previous nu, so the
per-state constraint holds at bisection accuracy in the returned values.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

_EXP_CLAMP = 500.0

MODE_SCALED = 0
MODE_UNSCALED = 1
MODE_SQL = 2
MODE_XQL = 3

GEN_CHI2 = 0
GEN_SQL_CHI2 = 1
GEN_KL = 2
GEN_SOFT_CHI2 = 3


class KernelError(RuntimeError):
    pass


def _phi(gen_id: int, y: np.ndarray) -> np.ndarray:
    if gen_id == GEN_CHI2:
        return np.maximum(0.0, y + 1.0)
    if gen_id == GEN_SQL_CHI2:
        return np.maximum(0.0, 0.5 * (y + 1.0))
    if gen_id == GEN_KL:
        return np.exp(np.clip(y - 1.0, -_EXP_CLAMP, _EXP_CLAMP))
    if gen_id == GEN_SOFT_CHI2:
        return np.where(y >= 0.0, y + 1.0,
                        np.exp(np.clip(y, -_EXP_CLAMP, 0.0)))
    raise KernelError(f"unknown gen_id {gen_id}")


def _residual(q, pi, nu, mode, gen_id, alpha, target):
    """h(nu) per row: sum_a pi_a * w_a(nu) - target, accumulated column by
    column so the summation order matches the compiled backend."""
    n, n_actions = q.shape
    acc = np.full(n, -target)
    for a in range(n_actions):
        if mode == MODE_SCALED:
            w = _phi(gen_id, (q[:, a] - nu) / alpha)
        elif mode == MODE_UNSCALED:
            w = _phi(gen_id, q[:, a] - nu)
        else:  # MODE_SQL
            w = np.maximum(0.0, 1.0 + (q[:, a] - nu) / (2.0 * alpha))
        acc = acc + pi[:, a] * w
    return acc


def _solve_roots(q, pi, mode, gen_id, alpha, target, bisect_tol, row_ids=None):
    """Root of the per-state residual for each row. q rows must already be
    masked: unobserved actions carry pi == 0 and a finite placeholder q.
    row_ids, when given, are the original state indices (error messages only).
    """
    n, n_actions = q.shape
    q_obs = np.where(pi > 0.0, q, np.inf)
    q_low = q_obs.min(axis=1)
    q_obs = np.where(pi > 0.0, q, -np.inf)
    q_high = q_obs.max(axis=1)

    if mode == MODE_XQL:
        # nu = m + alpha * log sum_a pi exp((q_a - m)/alpha), m = max observed q
        acc = np.zeros(n)
        for a in range(n_actions):
            e = np.clip((q[:, a] - q_high) / alpha, -_EXP_CLAMP, 0.0)
            acc = acc + pi[:, a] * np.exp(e)
        return q_high + alpha * np.log(acc)

    scale = alpha if mode == MODE_SCALED else (2.0 * alpha if mode == MODE_SQL else 1.0)
    lo = q_low - scale
    hi = q_high.copy()

    def _state_name(mask):
        row = int(np.flatnonzero(mask)[0])
        return row if row_ids is None else int(row_ids[row])

    pad = scale
    for _ in range(64):
        need = _residual(q, pi, lo, mode, gen_id, alpha, target) < 0.0
        if not need.any():
            break
        lo = np.where(need, lo - pad, lo)
        pad *= 2.0
    else:
        raise KernelError(f"lower bracket growth failed at state {_state_name(need)}")
    pad = scale
    for _ in range(64):
        need = _residual(q, pi, hi, mode, gen_id, alpha, target) > 0.0
        if not need.any():
            break
        hi = np.where(need, hi + pad, hi)
        pad *= 2.0
    else:
        raise KernelError(f"upper bracket growth failed at state {_state_name(need)}")

    for _ in range(200):
        active = (hi - lo) > bisect_tol
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        h = _residual(q, pi, mid, mode, gen_id, alpha, target)
        go_up = active & (h >= 0.0)
        go_dn = active & (h < 0.0)
        lo = np.where(go_up, mid, lo)
        hi = np.where(go_dn, mid, hi)
    return 0.5 * (lo + hi)


def semi_fixed_point(transition_hat, pi_d, reward, support_mask, gamma, mode, gen_id,
                     alpha, target, tol, max_sweeps, bisect_tol, damping, nu0):
    """Damped fixed-point iteration for the per-state root problem.

    Returns (nu, q, sweeps, converged, final_diff). nu equals the exact root
    of the returned q at every supported state; unsupported states keep nu0.
    """
    n_states, n_actions = reward.shape
    t2 = np.ascontiguousarray(transition_hat).reshape(n_states * n_actions, n_states)
    pi = np.where(support_mask, pi_d, 0.0)
    state_rows = np.flatnonzero(support_mask.any(axis=1))
    nu = np.asarray(nu0, float).copy()

    damp = damping
    prev_diff = np.inf
    osc = 0
    converged = False
    diff = np.inf
    q = reward + gamma * (t2 @ nu).reshape(n_states, n_actions)
    sweeps = 0
    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        q = reward + gamma * (t2 @ nu).reshape(n_states, n_actions)
        roots = _solve_roots(q[state_rows], pi[state_rows], mode, gen_id,
                             alpha, target, bisect_tol, row_ids=state_rows)
        diff = float(np.max(np.abs(roots - nu[state_rows]))) if state_rows.size else 0.0
        if diff <= tol or sweep == max_sweeps:
            nu[state_rows] = roots
            converged = diff <= tol
            break
        nu[state_rows] += damp * (roots - nu[state_rows])
        if diff > prev_diff * (1.0 + 1e-12):
            osc += 1
            if osc >= 8:
                damp = max(0.5 * damp, 1.0 / 64.0)
                osc = 0
        else:
            osc = 0
        prev_diff = diff
    return nu, q, sweeps, converged, diff
