"""Violation metrics and off-policy evaluation estimates."""

import numpy as np
import pytest

from dicetab import (
    OptimizerConfig,
    bellman_flow_violation,
    exact_policy_value,
    exact_stationary_distribution,
    flow_residual,
    generate_random_mdp,
    make_generator,
    ope_estimate,
    ope_rmse,
    optidice_solve,
    policy_correction_violation,
    semidice_solve,
    violation_report,
)

import oracles


@pytest.fixture(scope="module")
def exact_setup():
    mdp = generate_random_mdp(21, n_states=10, n_actions=3, n_successors=3)
    behavior = oracles.random_policy(2, 10, 3, concentration=4.0)
    target = oracles.random_policy(3, 10, 3, concentration=4.0)
    model = oracles.perfect_model(mdp, behavior)
    d_b = exact_stationary_distribution(mdp, behavior)
    d_t = exact_stationary_distribution(mdp, target)
    w_exact = np.zeros_like(d_b)
    pos = d_b > 0
    w_exact[pos] = d_t[pos] / d_b[pos]
    return mdp, behavior, target, model, w_exact


def test_flow_residual_zero_for_exact_correction(exact_setup):
    _, _, _, model, w_exact = exact_setup
    resid = flow_residual(w_exact, model)
    assert np.max(np.abs(resid)) <= 1e-12
    assert bellman_flow_violation(w_exact, model) <= 1e-11


def test_flow_residual_mass_conservation(exact_setup):
    """Summing the residual telescopes the transition rows away, leaving
    (1 - gamma) (1 - total corrected mass) for any correction."""
    _, _, _, model, _ = exact_setup
    rng = np.random.default_rng(0)
    w = rng.uniform(0.0, 2.0, size=model.d_D.shape) * model.support_mask
    total = float((w * model.d_D).sum())
    expected = (1.0 - model.gamma) * (1.0 - total)
    assert flow_residual(w, model).sum() == pytest.approx(expected, abs=1e-12)


def test_ope_estimate_exact_on_perfect_model(exact_setup):
    mdp, _, target, model, w_exact = exact_setup
    est = ope_estimate(w_exact, model, signal="reward")
    rho_norm, rho_raw = exact_policy_value(mdp, target, signal="reward")
    assert est == pytest.approx(rho_norm, abs=1e-9)
    assert rho_raw == pytest.approx(rho_norm / (1.0 - mdp.gamma))


def test_ope_estimate_cost_signal_and_validation():
    from dicetab import TabularMdp
    base = generate_random_mdp(21, n_states=10, n_actions=3, n_successors=3)
    mdp = TabularMdp(base.transition, base.reward, base.p0, base.gamma,
                     cost=np.full_like(base.reward, 0.25))
    behavior = oracles.random_policy(2, 10, 3, concentration=4.0)
    model = oracles.perfect_model(mdp, behavior)
    ones = np.ones_like(model.d_D)
    est = ope_estimate(ones, model, signal="cost")
    # occupancy sums to one, so a constant cost estimates itself
    assert est == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(ValueError, match="signal"):
        ope_estimate(ones, model, signal="regret")


def test_ope_rmse_arithmetic():
    assert ope_rmse([(1.0, 0.0), (0.0, 1.0)]) == pytest.approx(1.0)
    assert ope_rmse([(2.0, 2.0)]) == 0.0
    assert ope_rmse([(3.0, 0.0), (0.0, 4.0)]) == pytest.approx(
        np.sqrt((9.0 + 16.0) / 2.0))
    with pytest.raises(ValueError, match="at least one"):
        ope_rmse([])


def test_policy_correction_violation_targets():
    w = np.array([[2.0, 0.0], [0.5, 0.5]])
    pi = np.array([[0.5, 0.5], [0.5, 0.5]])
    # sums: 1.0 and 0.5 -> deviations from 1.0: 0.0 and 0.5
    assert policy_correction_violation(w, pi) == pytest.approx(0.5)
    assert policy_correction_violation(w, pi, target=0.5) == pytest.approx(0.5)
    mask = np.array([True, False])
    assert policy_correction_violation(w, pi, state_mask=mask) == 0.0


def test_violation_report_fields(small_run):
    corr = semidice_solve(small_run.model, make_generator("chi2"),
                          OptimizerConfig(alpha=0.05))
    rep = violation_report(corr, small_run.model)
    assert rep.generator_name == "chi2"
    assert rep.alpha_or_beta == pytest.approx(0.05)
    assert rep.viol_policy_correction <= 1e-8
    assert rep.viol_bellman_flow == pytest.approx(
        bellman_flow_violation(corr.w_a_given_s, small_run.model))
    assert rep.n_sparse_states == 0


def test_violation_report_full_dual(small_run):
    corr = optidice_solve(small_run.model, make_generator("chi2"),
                          OptimizerConfig(alpha=0.1))
    rep = violation_report(corr, small_run.model)
    assert rep.viol_bellman_flow <= 1e-6
    # occupancy corrections generally do not satisfy the per-policy sum
    assert rep.viol_policy_correction > 1e-3


def test_violation_report_counts_sparse_rows(small_run):
    w = np.ones((small_run.model.n_states, small_run.model.n_actions))
    dead = np.flatnonzero(small_run.model.state_mask)[:2]
    w[dead] = 0.0
    rep = violation_report(w, small_run.model, alpha_or_beta=0.5)
    assert rep.n_sparse_states == 2
    assert rep.generator_name == "unknown"
    assert rep.alpha_or_beta == 0.5


def test_violation_report_alpha_fallback_nan(small_run):
    w = np.ones((small_run.model.n_states, small_run.model.n_actions))
    rep = violation_report(w, small_run.model)
    assert np.isnan(rep.alpha_or_beta)


def test_violation_report_rejects_state_vectors(small_run):
    with pytest.raises(ValueError, match="state-action"):
        violation_report(np.ones(small_run.model.n_states), small_run.model)
