"""State-marginal extraction: recovery, preconditions, and the sampled path."""

import numpy as np
import pytest

from dicetab import (
    OptimizerConfig,
    bellman_flow_violation,
    build_mle_model,
    collect_dataset,
    exact_stationary_distribution,
    extract_bias_reduced,
    extract_direct,
    generate_random_mdp,
    make_generator,
    marginal_correction,
    semidice_solve,
)

import oracles
from conftest import build_bank_run

KL = make_generator("kl")
CHI2 = make_generator("chi2")
# 1e-8 keeps the stop above the float-precision floor of the summed
# gradient on sharply-weighted instances
CFG = OptimizerConfig(tol=1e-8)


@pytest.fixture(scope="module")
def run():
    return build_bank_run(7, n_states=12, n_actions=3, n_successors=3,
                          n_trajectories=40, horizon=60)


@pytest.fixture(scope="module")
def corr(run):
    return semidice_solve(run.model, CHI2, OptimizerConfig(alpha=0.01))


def test_perfect_model_recovers_exact_marginal_ratio():
    """When the model is exact and the per-policy weights come from a known
    target policy, extraction must return w_s = d_target / d_behavior."""
    mdp = generate_random_mdp(11, n_states=9, n_actions=3, n_successors=3)
    behavior = oracles.random_policy(0, 9, 3, concentration=5.0)
    target = oracles.random_policy(1, 9, 3, concentration=5.0)
    model = oracles.perfect_model(mdp, behavior)
    w_policy = target.probs / behavior.probs
    ext = extract_direct(model, w_policy, KL, CFG)
    assert ext.converged
    d_t = exact_stationary_distribution(mdp, target).sum(axis=1)
    d_b = model.d_D_state
    np.testing.assert_allclose(ext.w_s, d_t / d_b, atol=1e-7)
    assert ext.viol_bellman_flow <= 1e-8


def test_extraction_repairs_per_policy_weights(run, corr):
    before = bellman_flow_violation(
        corr.w_a_given_s * run.model.pi_D.probs, run.model)
    ext = extract_direct(run.model, corr.w_a_given_s, KL, CFG)
    assert ext.converged
    w_sa = marginal_correction(ext, corr.w_a_given_s)
    after = bellman_flow_violation(w_sa, run.model)
    assert after <= 1e-6
    assert before > 100 * after
    # the result object certifies the violation of its own combined weights
    assert ext.viol_bellman_flow == pytest.approx(after, abs=1e-9)


@pytest.mark.parametrize("name", ["kl", "chi2", "soft_chi2"])
def test_extraction_generators_agree_on_flow(run, corr, name):
    ext = extract_direct(run.model, corr.w_a_given_s, make_generator(name), CFG)
    assert ext.converged
    assert ext.viol_bellman_flow <= 1e-6


def test_extraction_precondition_names_offending_state(run, corr):
    bad = corr.w_a_given_s.copy()
    s = int(np.flatnonzero(run.model.state_mask)[0])
    bad[s] *= 1.5
    with pytest.raises(ValueError, match=f"state {s}"):
        extract_direct(run.model, bad, KL, CFG)


def test_extraction_input_validation(run, corr):
    with pytest.raises(ValueError, match="shape"):
        extract_direct(run.model, corr.w_a_given_s[:, :2], KL, CFG)
    neg = corr.w_a_given_s.copy()
    neg[run.model.support_mask] -= 2 * neg[run.model.support_mask].max()
    with pytest.raises(ValueError, match="nonnegative"):
        extract_direct(run.model, neg, KL, CFG)


def test_bias_reduced_exact_matches_direct(run, corr):
    direct = extract_direct(run.model, corr.w_a_given_s, KL, CFG)
    exact = extract_bias_reduced(run.model, corr.w_a_given_s, KL, CFG,
                                 sampling="exact")
    assert exact.converged
    # both stop on a summed-gradient criterion of 1e-8, which pins w_s to
    # the shared unique minimizer at roughly 1e-6
    np.testing.assert_allclose(exact.w_s, direct.w_s, atol=5e-6)
    assert exact.viol_bellman_flow <= 1e-7


def test_bias_reduced_sampled_converges_to_exact(run, corr):
    """The Monte-Carlo operator gap shrinks like 1 / sqrt(n_samples)."""
    gaps = []
    for n in (200, 5_000, 400_000):
        ext = extract_bias_reduced(run.model, corr.w_a_given_s, KL,
                                   OptimizerConfig(seed=0),
                                   sampling="dataset_samples", n_samples=n)
        gaps.append(ext.diagnostics["gap_to_exact"])
        assert ext.diagnostics["n_unsampled_supported"] >= 0
    assert gaps[1] < gaps[0]
    assert gaps[2] < gaps[1]
    assert gaps[2] <= 0.05
    assert gaps[2] < gaps[0] / 20


def test_bias_reduced_unsampled_states_pinned(run, corr):
    ext = extract_bias_reduced(run.model, corr.w_a_given_s, KL,
                               OptimizerConfig(seed=3),
                               sampling="dataset_samples", n_samples=5)
    n_unsampled = ext.diagnostics["n_unsampled_supported"]
    assert n_unsampled > 0
    pinned = float(KL.f_prime(1.0))
    assert int(np.sum(ext.a_approx == pinned)) >= n_unsampled


def test_bias_reduced_rejects_unknown_sampling(run, corr):
    with pytest.raises(ValueError, match="sampling"):
        extract_bias_reduced(run.model, corr.w_a_given_s, KL, CFG,
                             sampling="bootstrap")


def test_marginal_correction_shape_and_support(run, corr):
    ext = extract_direct(run.model, corr.w_a_given_s, KL, CFG)
    w_sa = marginal_correction(ext, corr.w_a_given_s)
    assert w_sa.shape == (run.model.n_states, run.model.n_actions)
    # per-policy weights are zero off support and w_s is zero at unsupported
    # states, so the combination inherits both masks
    assert np.all(w_sa[~run.model.support_mask] == 0.0)
    np.testing.assert_array_equal(w_sa, ext.w_s[:, None] * corr.w_a_given_s)


def test_extraction_solution_unique_across_initializations(run, corr):
    a = extract_direct(run.model, corr.w_a_given_s, KL, CFG)
    b = extract_direct(run.model, corr.w_a_given_s, KL, CFG,
                       mu0=np.linspace(-2.0, 2.0, run.model.n_states))
    np.testing.assert_allclose(a.w_s, b.w_s, atol=1e-7)


def test_extraction_handles_uniform_weights():
    """w(a|s) = 1 with an exact model is already flow-consistent, so the
    recovered state marginal must be identically one on the support."""
    model = oracles.perfect_model(
        generate_random_mdp(3, n_states=7, n_actions=2, n_successors=3),
        oracles.random_policy(9, 7, 2))
    ones = np.ones((model.n_states, model.n_actions))
    ext = extract_direct(model, ones, KL, CFG)
    np.testing.assert_allclose(ext.w_s[model.state_mask], 1.0, atol=1e-8)


def test_extraction_gradient_matches_finite_differences(run, corr):
    """The extraction dual documented in the module docstring: its finite
    differences must match the analytic gradient the optimizer uses."""
    model = run.model
    w_policy = corr.w_a_given_s
    sup = np.flatnonzero(model.state_mask)
    pi_w = (w_policy * model.pi_D.probs * model.support_mask)[sup]
    gamma = model.gamma

    def objective(mu):
        a_val = (gamma * np.einsum("ra,raz,z->r",
                                   pi_w, model.transition_hat[sup], mu)
                 - pi_w.sum(axis=1) * mu[sup])
        return float((1.0 - gamma) * (model.p0_hat @ mu)
                     + model.d_D_state[sup] @ KL.f_star0(a_val))

    rng = np.random.default_rng(4)
    mu = rng.normal(size=model.n_states)
    fd = oracles.fd_gradient(objective, mu, h=1e-6)
    ext = extract_direct(model, w_policy, KL, CFG, mu0=mu)
    # recompute the analytic gradient at mu via the flow-residual identity
    a_val = (gamma * np.einsum("ra,raz,z->r",
                               pi_w, model.transition_hat[sup], mu)
             - pi_w.sum(axis=1) * mu[sup])
    w_sup = KL.f_star0_prime(a_val)
    w_s = np.zeros(model.n_states)
    w_s[sup] = w_sup
    from dicetab import flow_residual
    analytic = flow_residual(w_s[:, None] * w_policy, model)
    assert np.max(np.abs(fd - analytic)) <= 1e-6
    assert ext.converged
