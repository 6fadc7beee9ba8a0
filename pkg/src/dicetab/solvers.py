"""Occupancy-ratio solvers on the empirical model.

All solvers consume an MleModel and produce a CorrectionSet. Two families:

* Full-dual solvers (optidice_solve) minimize the regularized dual over the
  value vector nu with exact derivatives; the gradient of that dual is the
  signed flow residual of the induced occupancy, so a small gradient norm is
  the same thing as near-feasibility.

* Per-state fixed-point solvers (semidice_solve, fdvl_solve, sql_solve,
  xql_solve) iterate backups against a per-state normalization root. They are
  exact about the constraint sum_a pi_D(a|s) w(a|s) = target but only
  approximately flow-feasible; that gap is the whole reason the extraction
  module exists.

odice_solve sits apart: it follows a modified descent direction (forward,
full, or orthogonalized true gradient) that is not the gradient of any
scalar objective in its orthogonal mode, so it carries no correctness
postcondition and is benchmarked rather than certified.

Unsupported state-action pairs never influence a solve, and every returned
correction is zero there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import _kernels
from ._newton import minimize_convex
from .divergence import FGenerator, f_star0_curvature
from .mdp import MleModel, TabularPolicy

__all__ = [
    "OptimizerConfig",
    "CorrectionSet",
    "SolveReport",
    "optidice_solve",
    "semidice_solve",
    "fdvl_solve",
    "sql_solve",
    "xql_solve",
    "odice_solve",
    "extract_tabular_policy",
    "extract_tabular_policy_with_info",
    "correction_to_json",
    "correction_from_json",
]

_GEN_IDS = {
    "chi2": _kernels.GEN_CHI2,
    "sql_chi2": _kernels.GEN_SQL_CHI2,
    "kl": _kernels.GEN_KL,
    "soft_chi2": _kernels.GEN_SOFT_CHI2,
}

_KINDS = ("state_action", "per_policy", "state")


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs shared by every solver; unused fields are ignored per solver.

    tol is the convergence tolerance in each solver's native residual: the
    sup-norm gradient for full duals, the sup-norm nu change per sweep for
    the fixed-point family. method selects newton or gd for the smooth
    convex duals only.
    """

    alpha: float = 0.01
    beta: float = 0.5
    eta: float = 1.0
    max_iters: int = 100_000
    tol: float = 1e-9
    step_size: float = 1.0
    seed: int = 0
    damping: float = 1.0
    bisect_tol: float = 1e-12
    method: str = "newton"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.tol <= 0 or self.bisect_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.method not in ("newton", "gd"):
            raise ValueError(f"method must be 'newton' or 'gd', got {self.method!r}")


@dataclass
class CorrectionSet:
    """One solver's output. kind says which correction arrays are primary:

    state_action -> w_sa(s, a), an occupancy ratio d_pi / d_D
    per_policy   -> w_a_given_s(s, a), a conditional ratio pi(a|s) / pi_D(a|s)
    state        -> w_s(s), a state-marginal ratio d_pi(s) / d_D(s)

    Arrays not relevant to the kind stay None. All corrections are
    nonnegative and zero off the dataset support.
    """

    kind: str
    w_sa: Optional[np.ndarray] = None
    w_a_given_s: Optional[np.ndarray] = None
    w_s: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    a_approx: Optional[np.ndarray] = None
    lambda_cost: Optional[float] = None
    converged: bool = False
    iterations: int = 0
    generator: Optional[str] = None
    solver: Optional[str] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        for name in ("w_sa", "w_a_given_s", "w_s"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, float)
                if np.any(arr < 0):
                    raise ValueError(f"{name} must be nonnegative")
                setattr(self, name, arr)

    def primary(self) -> np.ndarray:
        if self.kind == "state_action":
            return self.w_sa
        if self.kind == "per_policy":
            return self.w_a_given_s
        return self.w_s


@dataclass(frozen=True)
class SolveReport:
    """Flat per-run summary assembled by the benchmark runner."""

    converged: bool
    iterations: int
    final_grad_norm: float
    viol_bellman_flow: float
    viol_policy_correction: float
    ope_reward: float
    ope_cost: float
    exact_return: float
    wall_time: float


def _gen_id(g: FGenerator) -> int:
    try:
        return _GEN_IDS[g.name]
    except KeyError:
        raise ValueError(
            f"generator {g.name!r} is not supported by the solvers; "
            f"expected one of {tuple(_GEN_IDS)}") from None


def _run_fixed_point(model, reward, mode, gen_id, alpha, target, cfg, nu0):
    if nu0 is None:
        nu0 = np.zeros(model.n_states)
    return _kernels.semi_fixed_point(
        model.transition_hat, model.pi_D.probs, reward, model.support_mask,
        model.gamma, mode, gen_id, alpha, target,
        cfg.tol, cfg.max_iters, cfg.bisect_tol, cfg.damping, nu0)


def semidice_solve(model: MleModel, g: FGenerator, cfg: OptimizerConfig,
                   penalized_reward: Optional[np.ndarray] = None,
                   nu0: Optional[np.ndarray] = None) -> CorrectionSet:
    """Per-state normalized correction: sum_a pi_D(a|s) w(a|s) = 1.

    Iterates q <- r + gamma T_hat nu against the per-state root; the root map
    is a gamma-contraction in the sup norm, so the undamped iteration
    converges linearly at rate gamma. The returned (nu, q) pair is exactly
    root-consistent (the last pass is undamped), so the per-state constraint
    holds at bisection accuracy, not just at cfg.tol.
    """
    r = model.reward_hat if penalized_reward is None else np.asarray(penalized_reward, float)
    nu, q, sweeps, conv, diff = _run_fixed_point(
        model, r, _kernels.MODE_SCALED, _gen_id(g), cfg.alpha, 1.0, cfg, nu0)
    w = g.f_star0_prime((q - nu[:, None]) / cfg.alpha) * model.support_mask
    return CorrectionSet(
        kind="per_policy", w_a_given_s=w, nu=nu, q=q,
        converged=conv, iterations=sweeps, generator=g.name, solver="semidice",
        diagnostics={"final_diff": diff, "alpha": cfg.alpha})


def fdvl_solve(model: MleModel, g: FGenerator, beta: float,
               cfg: OptimizerConfig, nu0: Optional[np.ndarray] = None) -> CorrectionSet:
    """Same backup structure as semidice but with unscaled conjugate slope
    and per-state target (1 - beta) / beta. Only beta = 0.5 yields a valid
    policy correction (target 1); other betas are benchmarked as-is.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    target = (1.0 - beta) / beta
    nu, q, sweeps, conv, diff = _run_fixed_point(
        model, model.reward_hat, _kernels.MODE_UNSCALED, _gen_id(g), 1.0, target, cfg, nu0)
    w = g.f_star0_prime(q - nu[:, None]) * model.support_mask
    return CorrectionSet(
        kind="per_policy", w_a_given_s=w, nu=nu, q=q,
        converged=conv, iterations=sweeps, generator=g.name, solver="fdvl",
        diagnostics={"final_diff": diff, "beta": beta, "target": target})


def sql_solve(model: MleModel, alpha: float, cfg: OptimizerConfig,
              nu0: Optional[np.ndarray] = None) -> CorrectionSet:
    """Sparse per-state correction w = max(0, 1 + (q - v) / (2 alpha)).

    Equivalent to the scaled sql_chi2 root shifted by exactly alpha in v;
    the weights and the per-state normalization are the same.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    nu, q, sweeps, conv, diff = _run_fixed_point(
        model, model.reward_hat, _kernels.MODE_SQL, _kernels.GEN_SQL_CHI2,
        alpha, 1.0, cfg, nu0)
    w = np.maximum(0.0, 1.0 + (q - nu[:, None]) / (2.0 * alpha)) * model.support_mask
    return CorrectionSet(
        kind="per_policy", w_a_given_s=w, nu=nu, q=q,
        converged=conv, iterations=sweeps, generator="sql_chi2", solver="sql",
        diagnostics={"final_diff": diff, "alpha": alpha})


def xql_solve(model: MleModel, alpha: float, cfg: OptimizerConfig,
              nu0: Optional[np.ndarray] = None) -> CorrectionSet:
    """KL per-state correction with the closed-form log-sum-exp backup
    v(s) = alpha * log sum_a pi_D(a|s) exp(q(s, a) / alpha).

    At small alpha the exponent spread (q - v) / alpha can fall below the
    clamp at -500 for low-q actions; those weights underflow to zero and the
    saturated flag is set in diagnostics.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    nu, q, sweeps, conv, diff = _run_fixed_point(
        model, model.reward_hat, _kernels.MODE_XQL, _kernels.GEN_KL,
        alpha, 1.0, cfg, nu0)
    expo = (q - nu[:, None]) / alpha
    w = np.exp(np.clip(expo, -500.0, 500.0)) * model.support_mask
    saturated = bool(np.any(expo[model.support_mask] < -500.0))
    return CorrectionSet(
        kind="per_policy", w_a_given_s=w, nu=nu, q=q,
        converged=conv, iterations=sweeps, generator="kl", solver="xql",
        diagnostics={"final_diff": diff, "alpha": alpha, "saturated": saturated,
                     "min_exponent": float(expo[model.support_mask].min())})


def _supported_pairs(model: MleModel):
    s_idx, a_idx = np.nonzero(model.support_mask)
    return s_idx, a_idx


def optidice_solve(model: MleModel, g: FGenerator, cfg: OptimizerConfig,
                   penalized_reward: Optional[np.ndarray] = None,
                   nu0: Optional[np.ndarray] = None) -> CorrectionSet:
    """Full-dual solver for the regularized occupancy problem.

    Minimizes over nu

        J(nu) = (1 - gamma) <p0_hat, nu>
                + alpha sum_{s,a} d_D(s,a) f*0(e(s,a) / alpha),
        e = r + gamma T_hat nu - nu,

    whose gradient is exactly the signed flow residual of the candidate
    occupancy w * d_D. Convergence is declared on sup-norm gradient <= tol,
    i.e. on per-state flow violation <= tol. The correction is
    w = (f*0)'(e / alpha) on supported pairs.
    """
    r = model.reward_hat if penalized_reward is None else np.asarray(penalized_reward, float)
    alpha = cfg.alpha
    gamma = model.gamma
    n = model.n_states
    s_idx, a_idx = _supported_pairs(model)
    t_sup = model.transition_hat[s_idx, a_idx]          # (n_sup, S)
    d = model.d_D[s_idx, a_idx]
    r_sup = r[s_idx, a_idx]
    m = gamma * t_sup.copy()
    m[np.arange(len(s_idx)), s_idx] -= 1.0              # e = r_sup + m @ nu
    curv = f_star0_curvature(g.name)
    p0_term = (1.0 - gamma) * model.p0_hat

    def make_evaluate(a):
        def evaluate(nu, need_hess):
            y = (r_sup + m @ nu) / a
            val = float(p0_term @ nu + a * (d @ g.f_star0(y)))
            dw = d * g.f_star0_prime(y)
            grad = p0_term + m.T @ dw
            hess = None
            if need_hess:
                c = (d / a) * curv(y)
                hess = m.T @ (c[:, None] * m)
            return val, grad, hess
        return evaluate

    if nu0 is None:
        # Start near the zero-residual manifold: least-squares nu with
        # e(s, a) ~ 0 on supported pairs. For the exponential generators this
        # keeps e / alpha out of the saturated region whenever possible.
        x0 = np.linalg.lstsq(m, -r_sup, rcond=None)[0]
    else:
        x0 = np.asarray(nu0, float)

    # Continuation for the exp-family generators: if the start still
    # saturates exp(e / alpha), first solve a ladder of larger alphas, each
    # warm-starting the next. The minimizers move continuously in alpha, so
    # the final solve begins inside the well-scaled region.
    stages = 0
    if g.name in ("kl", "soft_chi2"):
        height = float(np.max(np.abs(r_sup + m @ x0)))
        cur = alpha
        ladder = []
        while height / cur > 30.0 and cur < 1e12:
            cur *= 10.0
            ladder.append(cur)
        for a in reversed(ladder):
            x0, _, _, _ = minimize_convex(
                make_evaluate(a), x0, tol=max(cfg.tol, 1e-8), max_iters=cfg.max_iters,
                method=cfg.method, step_size=cfg.step_size)
            stages += 1

    nu, iters, conv, gnorm = minimize_convex(
        make_evaluate(alpha), x0, tol=cfg.tol, max_iters=cfg.max_iters,
        method=cfg.method, step_size=cfg.step_size)

    e = np.zeros((n, model.n_actions))
    e[s_idx, a_idx] = r_sup + m @ nu
    w = g.f_star0_prime(e / alpha) * model.support_mask
    q = r + gamma * (model.transition_hat.reshape(-1, n) @ nu).reshape(n, -1)
    return CorrectionSet(
        kind="state_action", w_sa=w, nu=nu, q=q,
        converged=conv, iterations=iters, generator=g.name, solver="optidice",
        diagnostics={"final_grad_norm": gnorm, "alpha": alpha, "method": cfg.method,
                     "continuation_stages": stages})


def odice_solve(model: MleModel, g: FGenerator, beta: float, eta: float,
                cfg: OptimizerConfig, nu0: Optional[np.ndarray] = None,
                mode: str = "orthogonal") -> CorrectionSet:
    """True-gradient family over per-transition residuals.

    The underlying objective, weighted by the empirical pair distribution
    and the estimated kernel, is

        L(nu) = sum_{s,a} d_D(s,a) sum_s' T_hat(s'|s,a)
                [(1 - beta) nu(s) + beta f*0(e(s,a,s'))],
        e(s,a,s') = r(s,a) + gamma nu(s') - nu(s).

    mode selects the per-transition direction: 'full' is the exact gradient
    of L; 'semi' drops the backward term gamma (f*0)'(e) at s'; 'orthogonal'
    keeps the component of the backward term orthogonal to the forward one,
    scaled by eta. With one-hot tabular features the projection removes the
    backward term exactly on self-loop transitions and leaves it untouched
    elsewhere. Updates are preconditioned by 1 / d_D(s) so step sizes are in
    value units; no correctness postcondition attaches to the orthogonal
    mode, which is the point of benchmarking it.

    Reported w(a|s) = sum_s' T_hat(s'|s,a) (f*0)'(e(s,a,s')).
    """
    if mode not in ("orthogonal", "full", "semi"):
        raise ValueError(f"mode must be orthogonal, full, or semi; got {mode!r}")
    if not (0.0 < beta < 1.0):
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    gamma = model.gamma
    n, n_actions = model.n_states, model.n_actions
    d_pair = model.d_D * model.support_mask
    weight = d_pair[:, :, None] * model.transition_hat     # (S, A, S')
    d_state = model.d_D_state
    sup_states = model.state_mask
    inv_d = np.where(sup_states, 1.0 / np.maximum(d_state, 1e-300), 0.0)
    # self_loop[s, :, s'] is True iff s' == s; orthogonal mode zeroes the
    # backward term exactly there (one-hot forward/backward gradients only
    # overlap on self loops).
    self_loop = np.eye(n, dtype=bool)[:, None, :]

    nu = np.zeros(n) if nu0 is None else np.asarray(nu0, float).copy()
    step = cfg.step_size
    conv = False
    gnorm = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        e = model.reward_hat[:, :, None] + gamma * nu[None, None, :] - nu[:, None, None]
        we = g.f_star0_prime(e)
        fw = (weight * we).sum(axis=(1, 2))                # forward mass at s
        grad = (1.0 - beta) * d_state - beta * fw
        if mode == "full":
            grad = grad + beta * gamma * np.einsum("saz,saz->z", weight, we)
        elif mode == "orthogonal":
            back = np.einsum("saz,saz->z", weight, np.where(self_loop, 0.0, we))
            grad = grad + beta * eta * gamma * back
        pre = grad * inv_d
        gnorm = float(np.max(np.abs(pre)))
        if gnorm <= cfg.tol:
            conv = True
            break
        nu = nu - step * pre

    e = model.reward_hat[:, :, None] + gamma * nu[None, None, :] - nu[:, None, None]
    w = np.einsum("saz,saz->sa", model.transition_hat, g.f_star0_prime(e))
    w = w * model.support_mask
    q = model.reward_hat + gamma * (model.transition_hat.reshape(-1, n) @ nu).reshape(n, n_actions)
    return CorrectionSet(
        kind="per_policy", w_a_given_s=w, nu=nu, q=q,
        converged=conv, iterations=it, generator=g.name, solver="odice",
        diagnostics={"final_grad_norm": gnorm, "beta": beta, "eta": eta, "mode": mode})


def odice_objective(model: MleModel, g: FGenerator, beta: float, nu: np.ndarray) -> float:
    """Scalar objective whose exact gradient is odice_solve's 'full' direction
    (before the 1/d preconditioning). Exposed for finite-difference checks."""
    gamma = model.gamma
    d_pair = model.d_D * model.support_mask
    weight = d_pair[:, :, None] * model.transition_hat
    e = model.reward_hat[:, :, None] + gamma * nu[None, None, :] - nu[:, None, None]
    lin = (1.0 - beta) * float(model.d_D_state @ nu)
    return lin + beta * float((weight * g.f_star0(e)).sum())


def odice_direction(model: MleModel, g: FGenerator, beta: float, eta: float,
                    nu: np.ndarray, mode: str = "orthogonal") -> np.ndarray:
    """The raw (unpreconditioned) direction odice_solve descends along."""
    gamma = model.gamma
    n = model.n_states
    d_pair = model.d_D * model.support_mask
    weight = d_pair[:, :, None] * model.transition_hat
    eye = np.eye(n, dtype=bool)
    self_loop = eye[:, None, :]
    e = model.reward_hat[:, :, None] + gamma * nu[None, None, :] - nu[:, None, None]
    we = g.f_star0_prime(e)
    grad = (1.0 - beta) * model.d_D_state - beta * (weight * we).sum(axis=(1, 2))
    if mode == "full":
        grad = grad + beta * gamma * np.einsum("saz,saz->z", weight, we)
    elif mode == "orthogonal":
        grad = grad + beta * eta * gamma * np.einsum(
            "saz,saz->z", weight, np.where(self_loop, 0.0, we))
    elif mode != "semi":
        raise ValueError(f"mode must be orthogonal, full, or semi; got {mode!r}")
    return grad


def extract_tabular_policy(corr: CorrectionSet, model: MleModel) -> TabularPolicy:
    """Policy induced by a correction; see the _with_info variant for the
    fallback bookkeeping."""
    return extract_tabular_policy_with_info(corr, model)[0]


def extract_tabular_policy_with_info(corr: CorrectionSet, model: MleModel):
    """Turn a correction into an executable policy.

    state_action corrections induce pi(a|s) proportional to w(s,a) d_D(s,a);
    per_policy ones induce pi(a|s) proportional to w(a|s) pi_D(a|s). States
    whose row is entirely zero (all mass clipped away, or never visited)
    fall back to the behavior policy. The info dict counts fallbacks on
    supported states separately from unvisited states, since only the former
    say anything about the solver.
    """
    if corr.kind == "state":
        raise ValueError(
            "state-marginal corrections do not determine a policy; "
            "combine with a per-policy correction first (marginal_correction)")
    if corr.kind == "state_action":
        mass = corr.w_sa * model.d_D
    else:
        mass = corr.w_a_given_s * model.pi_D.probs * model.support_mask
    row_sum = mass.sum(axis=1)
    ok = row_sum > 0.0
    probs = np.where(ok[:, None], mass / np.where(ok, row_sum, 1.0)[:, None],
                     model.pi_D.probs)
    supported = model.state_mask
    info = {
        "n_fallback_supported": int(np.sum(~ok & supported)),
        "n_unsupported_states": int(np.sum(~supported)),
        "fallback_states": np.flatnonzero(~ok & supported).tolist(),
    }
    return TabularPolicy(probs), info


# --- JSON serialization ------------------------------------------------------

_ARRAY_FIELDS = ("w_sa", "w_a_given_s", "w_s", "nu", "q", "mu", "a_approx")


def correction_to_json(corr: CorrectionSet) -> str:
    payload = {"schema_version": 1, "kind_tag": "correction_set"}
    for f in fields(corr):
        v = getattr(corr, f.name)
        if f.name in _ARRAY_FIELDS:
            payload[f.name] = None if v is None else np.asarray(v).tolist()
        elif f.name == "diagnostics":
            payload[f.name] = {k: v2 for k, v2 in v.items()
                               if isinstance(v2, (int, float, str, bool, type(None)))}
        else:
            payload[f.name] = v
    return json.dumps(payload, indent=2, sort_keys=True)


def correction_from_json(text: str) -> CorrectionSet:
    payload = json.loads(text)
    if payload.get("kind_tag") != "correction_set":
        raise ValueError("not a correction_set document")
    if payload.get("schema_version") != 1:
        raise ValueError(f"unsupported schema_version {payload.get('schema_version')!r}")
    kwargs = {}
    for f in fields(CorrectionSet):
        if f.name not in payload:
            continue
        v = payload[f.name]
        if f.name in _ARRAY_FIELDS:
            kwargs[f.name] = None if v is None else np.asarray(v, float)
        else:
            kwargs[f.name] = v
    if kwargs.get("diagnostics") is None:
        kwargs["diagnostics"] = {}
    return CorrectionSet(**kwargs)
