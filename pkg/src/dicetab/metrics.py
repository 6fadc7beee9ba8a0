"""Violation and off-policy evaluation metrics.

All sums run over supported states only: states the dataset never visits
carry no evidence, and the solvers are defined to leave them at zero. The
residual vector helper exposes the unsupported remainder for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from .mdp import MleModel

__all__ = [
    "ViolationReport",
    "bellman_flow_violation",
    "flow_residual",
    "policy_correction_violation",
    "ope_estimate",
    "ope_rmse",
    "violation_report",
]


@dataclass(frozen=True)
class ViolationReport:
    """Both violation metrics for one correction, plus identifying context."""

    viol_bellman_flow: float
    viol_policy_correction: float
    n_sparse_states: int
    generator_name: str
    alpha_or_beta: float


def flow_residual(w_sa: np.ndarray, model: MleModel) -> np.ndarray:
    """Signed per-state residual of the flow constraint for occupancy
    w_sa * d_D: (1-gamma) p0_hat + gamma T_hat_* d_w - sum_a d_w."""
    w_sa = np.asarray(w_sa, float)
    d_w = w_sa * model.d_D
    inflow = model.gamma * np.einsum("saz,sa->z", model.transition_hat, d_w)
    return (1.0 - model.gamma) * model.p0_hat + inflow - d_w.sum(axis=1)


def bellman_flow_violation(w_sa: np.ndarray, model: MleModel) -> float:
    """Summed absolute flow residual over supported states."""
    resid = flow_residual(w_sa, model)
    return float(np.abs(resid[model.state_mask]).sum())


def policy_correction_violation(w: np.ndarray, pi_d, state_mask=None,
                                target: float = 1.0) -> float:
    """Summed per-state deviation of sum_a w(a|s) pi_D(a|s) from target.

    pi_d may be a TabularPolicy or a raw (S, A) array. Without a state_mask
    every state counts, which is only meaningful if w is already zero off
    support.
    """
    probs = getattr(pi_d, "probs", pi_d)
    sums = (np.asarray(w, float) * np.asarray(probs, float)).sum(axis=1)
    dev = np.abs(sums - target)
    if state_mask is not None:
        dev = dev[np.asarray(state_mask, bool)]
    return float(dev.sum())


def ope_estimate(w_sa: np.ndarray, model: MleModel, signal: str = "reward") -> float:
    """Self-normalized-free importance estimate E_{d_D}[w * signal].

    Estimates the normalized policy value; multiply by 1 / (1 - gamma) for
    the discounted-return convention.
    """
    if signal == "reward":
        sig = model.reward_hat
    elif signal == "cost":
        sig = model.cost_hat
    else:
        raise ValueError(f"signal must be 'reward' or 'cost', got {signal!r}")
    return float((model.d_D * np.asarray(w_sa, float) * sig).sum())


def ope_rmse(pairs: Iterable[Tuple[float, float]]) -> float:
    """Root mean squared error over (estimate, exact) pairs."""
    arr = np.asarray(list(pairs), float)
    if arr.size == 0:
        raise ValueError("ope_rmse needs at least one (estimate, exact) pair")
    return float(np.sqrt(np.mean((arr[:, 0] - arr[:, 1]) ** 2)))


def violation_report(corr, model: MleModel, alpha_or_beta: Optional[float] = None) -> ViolationReport:
    """Build the standard report for a solver output.

    For per-policy corrections the flow metric is computed on w(a|s)
    interpreted as a state-action correction with an implicit uniform state
    marginal, which is exactly the uncorrected quantity the extraction step
    repairs. n_sparse_states counts supported states whose correction row is
    entirely zero.
    """
    w = corr.primary() if hasattr(corr, "primary") else np.asarray(corr, float)
    if w.ndim == 1:
        raise ValueError("violation_report needs a state-action shaped correction")
    viol_bf = bellman_flow_violation(w, model)
    viol_pc = policy_correction_violation(w, model.pi_D, model.state_mask)
    sparse = int(np.sum((w.sum(axis=1) == 0.0) & model.state_mask))
    gen = getattr(corr, "generator", None) or "unknown"
    if alpha_or_beta is None:
        diag = getattr(corr, "diagnostics", {}) or {}
        alpha_or_beta = diag.get("alpha", diag.get("beta", float("nan")))
    return ViolationReport(
        viol_bellman_flow=viol_bf,
        viol_policy_correction=viol_pc,
        n_sparse_states=sparse,
        generator_name=gen,
        alpha_or_beta=float(alpha_or_beta),
    )
