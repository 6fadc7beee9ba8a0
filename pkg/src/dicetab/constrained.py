"""Cost-constrained solvers: Lagrangian loops around the unconstrained ones.

The budget is stated in normalized units: a policy is feasible when its
occupancy-weighted expected cost E_{d_pi}[c] stays at or below
c_tilde = (1 - gamma) * c_lim, where c_lim bounds the usual discounted cost
sum. Every solver here runs the same dual ascent

    lambda <- clip(lambda + lr * (estimated_cost - c_tilde), 0, lambda_max)

and differs only in the inner solve and in how estimated_cost is formed:

* coptidice_solve: full-dual inner solve; the estimate E_{d_D}[w(s,a) c] is
  valid because w is an occupancy ratio.
* corsdice_solve: per-policy inner solve plus state-marginal extraction; the
  estimate uses the combined correction w_s(s) w(a|s), also valid.
* naive_constrained_semidice: per-policy inner solve with the per-policy
  weights plugged straight into the estimator. That estimator is biased (it
  ignores the state-marginal mismatch), so its lambda settles against the
  wrong cost; this is the negative control the other two are measured
  against.

Reported exact_cost / exact_return evaluate the extracted policy on the MLE
MDP: that is the environment the solvers actually optimize, so it isolates
constraint handling from model estimation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .divergence import FGenerator
from .extraction import ExtractionResult, extract_direct, marginal_correction
from .mdp import MleModel, TabularMdp, TabularPolicy, exact_policy_value, value_iteration
from .solvers import (
    CorrectionSet,
    OptimizerConfig,
    extract_tabular_policy_with_info,
    optidice_solve,
    semidice_solve,
)

__all__ = [
    "CostSpec",
    "ConstrainedResult",
    "attach_random_costs",
    "coptidice_solve",
    "naive_constrained_semidice",
    "corsdice_solve",
    "make_binding_instance",
]

FEASIBLE_SLACK = 0.05
LAMBDA_MAX = 1e3
LAMBDA_LR = 0.05
OUTER_ITERS = 200


@dataclass(frozen=True)
class CostSpec:
    """Cost matrix plus budget. c_lim is the discounted-sum budget; c_tilde
    is the same budget in normalized units and is exact by construction."""

    cost: np.ndarray
    c_lim: float
    gamma: float

    def __post_init__(self):
        c = np.asarray(self.cost, float)
        if np.any(c < 0):
            raise ValueError("cost must be nonnegative")
        if self.c_lim < 0:
            raise ValueError(f"c_lim must be nonnegative, got {self.c_lim}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        object.__setattr__(self, "cost", c)

    @property
    def c_tilde(self) -> float:
        return (1.0 - self.gamma) * self.c_lim


@dataclass
class ConstrainedResult:
    correction: CorrectionSet
    policy: TabularPolicy
    lambda_cost: float
    estimated_cost: float
    exact_cost: float
    exact_return: float
    lambda_history: np.ndarray
    feasible: bool
    converged: bool
    extraction: Optional[ExtractionResult] = None
    diagnostics: dict = field(default_factory=dict)


def attach_random_costs(mdp: TabularMdp, seed: int, n_cost_states: int,
                        cost_value: float = 1.0,
                        n_cost_actions: Optional[int] = None,
                        placement_probs: Optional[np.ndarray] = None) -> TabularMdp:
    """Unit costs on a random subset of non-rewarding states.

    States carrying any reward are excluded so the cost constraint conflicts
    with the return objective instead of simply forbidding it. When
    n_cost_actions is given, only that many randomly chosen actions per cost
    state carry the cost, so a policy can dodge the charge at a state by
    acting differently instead of only by staying away; otherwise every
    action at the state is charged. placement_probs (length n_states,
    nonnegative) biases which states are drawn — weighting by a visitation
    measure puts the hazards where policies actually travel, which is what
    makes the resulting constraint genuinely compete with the return.
    """
    rewarding = np.flatnonzero(np.any(mdp.reward > 0, axis=1))
    candidates = np.setdiff1d(np.arange(mdp.n_states), rewarding)
    if not (0 < n_cost_states <= len(candidates)):
        raise ValueError(
            f"n_cost_states must be in [1, {len(candidates)}], got {n_cost_states}")
    if n_cost_actions is not None and not (0 < n_cost_actions <= mdp.n_actions):
        raise ValueError(
            f"n_cost_actions must be in [1, {mdp.n_actions}], got {n_cost_actions}")
    probs = None
    if placement_probs is not None:
        p = np.asarray(placement_probs, float)
        if p.shape != (mdp.n_states,) or np.any(p < 0):
            raise ValueError("placement_probs must be nonnegative with one "
                             "entry per state")
        p = p[candidates] + 1e-9
        probs = p / p.sum()
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=n_cost_states, replace=False, p=probs)
    cost = np.zeros((mdp.n_states, mdp.n_actions))
    if n_cost_actions is None:
        cost[chosen, :] = cost_value
    else:
        for s in chosen:
            acts = rng.choice(mdp.n_actions, size=n_cost_actions, replace=False)
            cost[s, acts] = cost_value
    return mdp.with_cost(cost)


def _finish(model, spec, corr, policy, info, est_cost, lam, history, converged,
            extraction=None, extra=None):
    mle = model.as_mdp()
    exact_cost, _ = exact_policy_value(mle, policy, "cost")
    exact_return, _ = exact_policy_value(mle, policy, "reward")
    diag = {
        "complementary_slackness": abs(lam * (spec.c_tilde - est_cost)),
        "n_fallback_supported": info["n_fallback_supported"],
    }
    if extra:
        diag.update(extra)
    return ConstrainedResult(
        correction=corr,
        policy=policy,
        lambda_cost=lam,
        estimated_cost=est_cost,
        exact_cost=exact_cost,
        exact_return=exact_return,
        lambda_history=np.asarray(history),
        feasible=bool(exact_cost <= spec.c_tilde * (1.0 + FEASIBLE_SLACK)),
        converged=converged,
        extraction=extraction,
        diagnostics=diag,
    )


def _ascend(lam: float, est_cost: float, spec: CostSpec, lr: float) -> float:
    """One projected dual step. The penalty enters the inner solves per step
    (r - lambda c), so the matching dual gradient is the discounted-sum
    constraint violation est / (1 - gamma) - c_lim, not the normalized one;
    using the normalized gap would silently rescale the learning rate by
    (1 - gamma)."""
    grad = est_cost / (1.0 - spec.gamma) - spec.c_lim
    return float(np.clip(lam + lr * grad, 0.0, LAMBDA_MAX))


def _dual_ascent(solve_at, estimate, spec, lr, n_iters):
    """Projected dual ascent shared by all three constrained solvers.

    solve_at(lam, carry) solves the inner problem warm-started from the
    previous carry; estimate(carry) turns its output into the normalized
    cost estimate the multiplier is driven by. With a near-greedy inner
    solver the estimate is a staircase in lambda, so a fixed step orbits an
    action switch forever; halving the step whenever the increment flips
    sign settles the iterate instead. The returned multiplier is the largest
    recent iterate: of the two sides of a switch, that one gives the
    lower-cost inner solution, and the final solve is run there.
    """
    lam = 0.0
    history = []
    carry = None
    cur_lr = lr
    prev_delta = 0.0
    for _ in range(n_iters):
        carry = solve_at(lam, carry)
        new_lam = _ascend(lam, estimate(carry), spec, cur_lr)
        history.append(new_lam)
        delta = new_lam - lam
        if delta * prev_delta < 0.0:
            cur_lr *= 0.5
        prev_delta = delta
        lam = new_lam
        if abs(delta) <= 1e-12 * max(1.0, lam):
            break
    lam = max(history[-8:]) if history else 0.0
    carry = solve_at(lam, carry)
    return lam, history, carry


def coptidice_solve(model: MleModel, g: FGenerator, spec: CostSpec,
                    cfg: OptimizerConfig, lambda_lr: float = LAMBDA_LR,
                    outer_iters: int = OUTER_ITERS) -> ConstrainedResult:
    """Full-dual inner solve on the penalized reward r - lambda c."""

    def solve_at(lam, carry):
        return optidice_solve(model, g, cfg,
                              penalized_reward=model.reward_hat - lam * spec.cost,
                              nu0=None if carry is None else carry.nu)

    def estimate(corr):
        return float((model.d_D * corr.w_sa * spec.cost).sum())

    lam, history, corr = _dual_ascent(solve_at, estimate, spec, lambda_lr,
                                      outer_iters)
    corr.lambda_cost = lam
    policy, info = extract_tabular_policy_with_info(corr, model)
    return _finish(model, spec, corr, policy, info, estimate(corr), lam,
                   history, corr.converged, extra={"solver": "coptidice"})


def naive_constrained_semidice(model: MleModel, g: FGenerator, spec: CostSpec,
                               cfg: OptimizerConfig, lambda_lr: float = LAMBDA_LR,
                               outer_iters: int = OUTER_ITERS) -> ConstrainedResult:
    """Negative control: per-policy weights used as if they were occupancy
    ratios. E_{d_D}[w(a|s) c] misses the state-marginal shift, so the
    constraint this loop enforces is not the one the policy actually incurs.
    """

    def solve_at(lam, carry):
        return semidice_solve(model, g, cfg,
                              penalized_reward=model.reward_hat - lam * spec.cost,
                              nu0=None if carry is None else carry.nu)

    def estimate(corr):
        return float((model.d_D * corr.w_a_given_s * spec.cost).sum())

    lam, history, corr = _dual_ascent(solve_at, estimate, spec, lambda_lr,
                                      outer_iters)
    corr.lambda_cost = lam
    policy, info = extract_tabular_policy_with_info(corr, model)
    return _finish(model, spec, corr, policy, info, estimate(corr), lam,
                   history, corr.converged,
                   extra={"solver": "naive_constrained_semidice"})


def corsdice_solve(model: MleModel, g_policy: FGenerator, g_state: FGenerator,
                   spec: CostSpec, cfg: OptimizerConfig,
                   lambda_lr: float = LAMBDA_LR,
                   outer_iters: int = OUTER_ITERS) -> ConstrainedResult:
    """Per-policy inner solve with state-marginal extraction in the loop.

    Each outer iteration re-solves the penalized per-policy problem (warm
    started), re-extracts the state correction, and ascends lambda against
    the combined estimate E_{d_D}[w_s(s) w(a|s) c]. At a fixed lambda the
    inner solve is bitwise the same computation as semidice_solve on the
    penalized reward.
    """

    def solve_at(lam, carry):
        nu0, mu0 = (None, None) if carry is None else (carry[0].nu, carry[1].mu)
        corr = semidice_solve(model, g_policy, cfg,
                              penalized_reward=model.reward_hat - lam * spec.cost,
                              nu0=nu0)
        ext = extract_direct(model, corr.w_a_given_s, g_state, cfg, mu0=mu0)
        return corr, ext

    def estimate(carry):
        corr, ext = carry
        w_full = marginal_correction(ext, corr.w_a_given_s)
        return float((model.d_D * w_full * spec.cost).sum())

    lam, history, (corr, ext) = _dual_ascent(solve_at, estimate, spec,
                                             lambda_lr, outer_iters)
    corr.lambda_cost = lam
    policy, info = extract_tabular_policy_with_info(corr, model)
    return _finish(model, spec, corr, policy, info, estimate((corr, ext)), lam,
                   history, corr.converged and ext.converged, extraction=ext,
                   extra={"solver": "corsdice",
                          "extraction_viol": ext.viol_bellman_flow})


def make_binding_instance(seed: int, n_states: int = 30, n_actions: int = 4,
                          n_successors: int = 4, gamma: float = 0.95,
                          n_cost_states: int = 5, cost_value: float = 1.0,
                          n_cost_actions: Optional[int] = 2,
                          n_trajectories: int = 30, horizon: int = 200,
                          mix_weight: float = 0.5, budget_fraction: float = 0.5,
                          max_attempts: int = 25):
    """Random MDP + dataset + cost budget where the constraint actually binds.

    The budget interpolates between the cheapest achievable cost and the
    cost of the return-optimal policy, both measured exactly on the MLE MDP:
    c_tilde = c_min + budget_fraction * (c_unc - c_min). The instance counts
    as binding when the unconstrained optimum overshoots the budget by at
    least 10% and there is real room below it. Cost placement is re-drawn
    (bounded attempts) until that holds.

    Hazard states are drawn where the behavior's discounted occupancy
    exceeds its undiscounted episode-average visitation — typically the
    first few steps from the initial state. Every policy must cross that
    funnel, so the instances price cost exactly where a fixed-length logged
    dataset under-represents discounted importance; uniformly placed
    hazards mostly land on states no policy cares about, and the constraint
    then never competes with the return.

    Returns (mdp, dataset, model, spec, info).
    """
    from .mdp import (build_mle_model, collect_dataset, exact_stationary_distribution,
                      generate_random_mdp, mixture_policy, undiscounted_occupancy)

    base = generate_random_mdp(seed, n_states, n_actions, n_successors, gamma)
    _, _, pi_star = value_iteration(base)
    uniform = TabularPolicy(np.full((n_states, n_actions), 1.0 / n_actions))
    behavior = mixture_policy(pi_star, uniform, mix_weight)
    d_disc = exact_stationary_distribution(base, behavior).sum(axis=1)
    d_avg = undiscounted_occupancy(base, behavior, horizon)
    popularity = np.maximum(0.0, d_disc - d_avg)

    last_reason = "no attempt"
    for attempt in range(max_attempts):
        mdp = attach_random_costs(base, seed + 1_000_000 + 7919 * attempt,
                                  n_cost_states, cost_value, n_cost_actions,
                                  placement_probs=popularity)
        dataset = collect_dataset(mdp, behavior, n_trajectories, horizon,
                                  seed + 2_000_000)
        model = build_mle_model(dataset, n_states, n_actions)
        mle = model.as_mdp()

        _, _, pi_ret = value_iteration(mle)
        cheap_mdp = TabularMdp(mle.transition, -mle.cost, mle.p0, mle.gamma)
        _, _, pi_cheap = value_iteration(cheap_mdp)
        c_unc, _ = exact_policy_value(mle, pi_ret, "cost")
        c_min, _ = exact_policy_value(mle, pi_cheap, "cost")

        c_tilde = c_min + budget_fraction * (c_unc - c_min)
        binding = c_unc > 1.1 * max(c_tilde, 1e-12) and (c_unc - c_min) > 1e-3
        if binding:
            spec = CostSpec(cost=mdp.cost, c_lim=c_tilde / (1.0 - gamma), gamma=gamma)
            info = {"attempts": attempt + 1, "c_unc": c_unc, "c_min": c_min,
                    "c_tilde": c_tilde}
            return mdp, dataset, model, spec, info
        last_reason = (f"attempt {attempt}: c_unc={c_unc:.4f} c_min={c_min:.4f} "
                       f"not binding")
    raise RuntimeError(
        f"could not construct a binding instance for seed {seed} in "
        f"{max_attempts} attempts ({last_reason})")
