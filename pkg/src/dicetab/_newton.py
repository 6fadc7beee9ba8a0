"""Shared minimizer for the smooth convex duals.

Damped (Levenberg) Newton with an Armijo backtracking line search, plus a
plain gradient-descent mode. The chi-square generators make the objectives
piecewise quadratic, so the Hessian can be singular on the active set;
the adaptive ridge keeps the solve well posed without disturbing the
quadratic convergence once the active set settles.
"""

from __future__ import annotations

import numpy as np

_ARMIJO = 1e-4


def minimize_convex(evaluate, x0, *, tol, max_iters, method="newton",
                    step_size=1.0, stop=None):
    """Minimize a convex function with analytic derivatives.

    evaluate(x, need_hess) must return (value, grad, hess_or_None); hess is
    only requested in newton mode. Iterates until the sup norm of the
    gradient drops to tol, the optional stop(x, value, grad) callback fires,
    or max_iters is hit.

    Returns (x, iterations, converged, final_grad_norm).
    """
    if method not in ("newton", "gd"):
        raise ValueError(f"method must be 'newton' or 'gd', got {method!r}")
    x = np.asarray(x0, float).copy()
    n = x.shape[0]
    ridge = 1e-10
    t_prev = step_size
    gnorm = np.inf
    x_last = None
    g_last = None
    stalls = 0
    for it in range(1, max_iters + 1):
        val, grad, hess = evaluate(x, method == "newton")
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol or (stop is not None and stop(x, val, grad)):
            return x, it, True, gnorm

        if method == "newton":
            p = None
            for _ in range(8):
                try:
                    p = np.linalg.solve(hess + ridge * np.eye(n), -grad)
                except np.linalg.LinAlgError:
                    ridge *= 100.0
                    continue
                if float(grad @ p) < 0.0:
                    break
                ridge *= 100.0
            if p is None or float(grad @ p) >= 0.0:
                p = -grad
            t0 = 1.0
        else:
            p = -grad
            # Barzilai-Borwein trial step (spectral step length); the Armijo
            # loop below still guards descent, so a bad BB step only costs
            # halvings. Cuts iteration counts by orders of magnitude on the
            # badly conditioned extraction duals.
            t0 = min(2.0 * t_prev, 1e6)
            if x_last is not None:
                dx = x - x_last
                dg = grad - g_last
                denom = float(dx @ dg)
                if denom > 0.0:
                    t_bb = float(dx @ dx) / denom
                    if np.isfinite(t_bb) and t_bb > 0.0:
                        t0 = min(t_bb, 1e6)
            x_last = x.copy()
            g_last = grad.copy()

        slope = float(grad @ p)
        t = t0
        ok = False
        # The exp-family objectives can sit at astronomic magnitudes while
        # the iterate is still in the saturated region; allow the comparison
        # a few ulps of slack there so rounding noise cannot stall descent.
        noise = 8.0 * np.finfo(float).eps * abs(val)
        for _ in range(70):
            val_new = evaluate(x + t * p, False)[0]
            if np.isfinite(val_new) and val_new <= val + _ARMIJO * t * slope + noise:
                ok = True
                break
            t *= 0.5
        if not ok:
            # No descent even at a vanishing step: either we are at the
            # numerical floor of the objective or the model is broken.
            # Treat a tiny gradient step as the former.
            if method == "newton":
                ridge *= 1e4
                if ridge < 1e12:
                    continue
            return x, it, False, gnorm
        x = x + t * p
        t_prev = t
        # Steps accepted only through the rounding slack make no real
        # progress; a run of them means the iterate sits at the numerical
        # floor of the objective and the tolerance is unreachable.
        if val - val_new <= noise:
            stalls += 1
            if stalls >= 3:
                return x, it, False, gnorm
        else:
            stalls = 0
        if method == "newton" and t == 1.0:
            ridge = max(ridge * 0.1, 1e-12)
    val, grad, _ = evaluate(x, False)
    gnorm = float(np.max(np.abs(grad)))
    done = gnorm <= tol or (stop is not None and stop(x, val, grad))
    return x, max_iters, done, gnorm
