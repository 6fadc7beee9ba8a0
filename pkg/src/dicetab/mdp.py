"""Tabular MDPs, dataset collection, and the empirical (MLE) model.

Everything downstream operates on either a TabularMdp (exact dynamics, used
for evaluation) or an MleModel (counts-based estimate built from one dataset,
used by every solver). Occupancies are normalized: d_pi sums to one, and the
normalized policy value rho = E_{d_pi}[r] relates to the usual discounted
return by rho / (1 - gamma).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "TabularMdp",
    "TabularPolicy",
    "Dataset",
    "MleModel",
    "generate_random_mdp",
    "value_iteration",
    "mixture_policy",
    "exact_stationary_distribution",
    "undiscounted_occupancy",
    "exact_policy_value",
    "collect_dataset",
    "build_mle_model",
    "mdp_to_json",
    "mdp_from_json",
    "dataset_to_json",
    "dataset_from_json",
]

SCHEMA_VERSION = 1

_ROW_SUM_TOL = 1e-12


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=float))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with dense transition tensor.

    transition has shape (S, A, S) with rows transition[s, a] summing to one.
    reward and cost have shape (S, A); cost defaults to all zeros. p0 is the
    initial state distribution.
    """

    transition: np.ndarray
    reward: np.ndarray
    p0: np.ndarray
    gamma: float
    cost: Optional[np.ndarray] = None

    def __post_init__(self):
        t = _freeze(self.transition)
        r = _freeze(self.reward)
        p0 = _freeze(self.p0)
        c = _freeze(self.cost) if self.cost is not None else _freeze(np.zeros_like(r))
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transition must be (S, A, S), got {t.shape}")
        n_s, n_a = t.shape[0], t.shape[1]
        if r.shape != (n_s, n_a):
            raise ValueError(f"reward must be ({n_s}, {n_a}), got {r.shape}")
        if c.shape != (n_s, n_a):
            raise ValueError(f"cost must be ({n_s}, {n_a}), got {c.shape}")
        if np.any(c < 0):
            raise ValueError("cost must be nonnegative")
        if p0.shape != (n_s,):
            raise ValueError(f"p0 must be ({n_s},), got {p0.shape}")
        if np.any(t < 0) or np.any(p0 < 0):
            raise ValueError("transition and p0 must be nonnegative")
        row_err = np.max(np.abs(t.sum(axis=2) - 1.0))
        if row_err > _ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (max error {row_err:.3e})")
        if abs(p0.sum() - 1.0) > _ROW_SUM_TOL:
            raise ValueError("p0 must sum to 1")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "p0", p0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_cost(self, cost: np.ndarray) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, self.p0, self.gamma, cost)


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy as a (S, A) row-stochastic matrix."""

    probs: np.ndarray

    def __post_init__(self):
        p = _freeze(self.probs)
        if p.ndim != 2:
            raise ValueError(f"probs must be 2-d, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("probs must be nonnegative")
        row_err = np.max(np.abs(p.sum(axis=1) - 1.0))
        if row_err > _ROW_SUM_TOL:
            raise ValueError(f"policy rows must sum to 1 (max error {row_err:.3e})")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Logged transitions, episode-major and time-ordered within episodes.

    Parallel arrays of length n_trajectories * horizon. step is the in-episode
    time index, episode the trajectory index. gamma is carried along from the
    generating MDP so the empirical model knows which discount to solve under.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    steps: np.ndarray
    episodes: np.ndarray
    n_trajectories: int
    horizon: int
    gamma: float

    def __post_init__(self):
        n = self.n_trajectories * self.horizon
        for name in ("states", "actions", "next_states", "steps", "episodes"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.int64))
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("rewards", "costs"):
            arr = _freeze(getattr(self, name))
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class MleModel:
    """Maximum-likelihood model of one dataset.

    d_D is the undiscounted empirical state-action frequency (sums to one),
    d_D_state its state marginal, pi_D the empirical behavior policy, and
    support_mask marks exactly the pairs with at least one visit. Rows of
    transition_hat and pi_D at unvisited pairs/states are uniform
    placeholders so the tensors stay row-stochastic; nothing downstream may
    read them except through support_mask.
    """

    transition_hat: np.ndarray
    d_D: np.ndarray
    d_D_state: np.ndarray
    pi_D: TabularPolicy
    p0_hat: np.ndarray
    support_mask: np.ndarray
    reward_hat: np.ndarray
    cost_hat: np.ndarray
    gamma: float

    def __post_init__(self):
        for name in ("transition_hat", "d_D", "d_D_state", "p0_hat", "reward_hat", "cost_hat"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        mask = np.ascontiguousarray(np.asarray(self.support_mask, dtype=bool))
        mask.setflags(write=False)
        object.__setattr__(self, "support_mask", mask)
        if not np.array_equal(self.d_D > 0, self.support_mask):
            raise ValueError("support_mask must coincide with d_D > 0")

    @property
    def n_states(self) -> int:
        return self.transition_hat.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition_hat.shape[1]

    @property
    def state_mask(self) -> np.ndarray:
        return self.d_D_state > 0

    def as_mdp(self) -> TabularMdp:
        """View the MLE quantities as a TabularMdp (for exact evaluation)."""
        return TabularMdp(self.transition_hat, self.reward_hat, self.p0_hat,
                          self.gamma, self.cost_hat)


def generate_random_mdp(seed: int, n_states: int = 30, n_actions: int = 4,
                        n_successors: int = 4, gamma: float = 0.95) -> TabularMdp:
    """Random sparse-transition MDP with an adversarially placed goal reward.

    Each (s, a) gets n_successors distinct successor states with Dirichlet(1)
    probabilities. The initial state is state 0 deterministically. Reward is 1
    for every action at a single goal state, 0 elsewhere; the goal is the
    state whose unit reward minimizes the optimal value at the initial state
    (lowest index on ties), which makes the planning problem as hard as this
    family allows.
    """
    rng = np.random.default_rng(seed)
    t = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=n_successors, replace=False)
            t[s, a, succ] = rng.dirichlet(np.ones(n_successors))
    p0 = np.zeros(n_states)
    p0[0] = 1.0

    # One value iteration per candidate goal, batched: rewards[c, s] = 1[s == c].
    rewards = np.eye(n_states)
    v = np.zeros((n_states, n_states))
    for _ in range(100_000):
        q = rewards[:, :, None] + gamma * np.einsum("saz,cz->csa", t, v)
        v_new = q.max(axis=2)
        if np.max(np.abs(v_new - v)) <= 1e-10:
            v = v_new
            break
        v = v_new
    goal = int(np.argmin(v[:, 0]))

    reward = np.zeros((n_states, n_actions))
    reward[goal, :] = 1.0
    return TabularMdp(t, reward, p0, gamma)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10):
    """Optimal Q and V plus the greedy deterministic policy.

    Ties in the greedy argmax go to the lowest action index. Iterates until
    the sup-norm change in V is at most tol.
    """
    n_s, n_a = mdp.n_states, mdp.n_actions
    t2 = mdp.transition.reshape(n_s * n_a, n_s)
    v = np.zeros(n_s)
    for _ in range(10_000_000):
        q = mdp.reward + mdp.gamma * (t2 @ v).reshape(n_s, n_a)
        v_new = q.max(axis=1)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= tol:
            break
    q = mdp.reward + mdp.gamma * (t2 @ v).reshape(n_s, n_a)
    greedy = np.argmax(q, axis=1)
    probs = np.zeros((n_s, n_a))
    probs[np.arange(n_s), greedy] = 1.0
    return q, v, TabularPolicy(probs)


def mixture_policy(p1: TabularPolicy, p2: TabularPolicy, weight: float) -> TabularPolicy:
    """Convex mixture weight * p1 + (1 - weight) * p2."""
    if not (0.0 <= weight <= 1.0):
        raise ValueError(f"weight must be in [0, 1], got {weight}")
    return TabularPolicy(weight * p1.probs + (1.0 - weight) * p2.probs)


def _policy_kernel(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    # P_pi[s, s'] = sum_a pi(a|s) T(s'|s, a)
    return np.einsum("sa,saz->sz", pi.probs, mdp.transition)


def exact_stationary_distribution(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """Normalized discounted occupancy d_pi(s, a) by direct linear solve.

    Solves (I - gamma * P_pi^T) x = (1 - gamma) p0 for the state occupancy x
    and spreads it over actions with pi. The result sums to one and satisfies
    the flow recurrence d(s) = (1-gamma) p0(s) + gamma (P_pi^T d)(s).
    """
    p_pi = _policy_kernel(mdp, pi)
    n = mdp.n_states
    x = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi.T, (1.0 - mdp.gamma) * mdp.p0)
    # The solve can leave harmless negative dust at unreachable states.
    if np.min(x) < -1e-10:
        raise RuntimeError(f"occupancy solve produced negative mass {np.min(x):.3e}")
    x = np.maximum(x, 0.0)
    return x[:, None] * pi.probs


def undiscounted_occupancy(mdp: TabularMdp, pi: TabularPolicy,
                           horizon: int) -> np.ndarray:
    """Average state visitation over fixed-length episodes, (1/H) sum_t P(s_t).

    This is the population counterpart of the empirical state distribution a
    logged dataset of horizon-H episodes converges to; it differs from the
    discounted occupancy most strongly near the initial states.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    p_pi = _policy_kernel(mdp, pi)
    d = mdp.p0.copy()
    acc = np.zeros_like(d)
    for _ in range(horizon):
        acc += d
        d = p_pi.T @ d
    return acc / horizon


def exact_policy_value(mdp: TabularMdp, pi: TabularPolicy, signal: str = "reward"):
    """(normalized, raw) expected value of reward or cost under pi.

    normalized = E_{d_pi}[signal]; raw = normalized / (1 - gamma) is the
    usual expected discounted sum.
    """
    if signal == "reward":
        sig = mdp.reward
    elif signal == "cost":
        sig = mdp.cost
    else:
        raise ValueError(f"signal must be 'reward' or 'cost', got {signal!r}")
    d = exact_stationary_distribution(mdp, pi)
    normalized = float(np.sum(d * sig))
    return normalized, normalized / (1.0 - mdp.gamma)


def _categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of probs. Vectorized inverse-CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def collect_dataset(mdp: TabularMdp, pi: TabularPolicy, n_trajectories: int = 30,
                    horizon: int = 100, seed: int = 0) -> Dataset:
    """Roll out fixed-length episodes of pi and log every transition.

    Episodes run the full horizon (no terminal states in this MDP family).
    All n_trajectories episodes advance in lockstep, one vectorized draw per
    time step, so the RNG consumption order is (initial states, then per step:
    actions, next states).
    """
    rng = np.random.default_rng(seed)
    n_traj = n_trajectories
    s = _categorical_rows(rng, np.tile(mdp.p0, (n_traj, 1)))
    states = np.empty((n_traj, horizon), dtype=np.int64)
    actions = np.empty((n_traj, horizon), dtype=np.int64)
    nexts = np.empty((n_traj, horizon), dtype=np.int64)
    for t in range(horizon):
        a = _categorical_rows(rng, pi.probs[s])
        s2 = _categorical_rows(rng, mdp.transition[s, a])
        states[:, t] = s
        actions[:, t] = a
        nexts[:, t] = s2
        s = s2
    steps = np.tile(np.arange(horizon, dtype=np.int64), n_traj)
    episodes = np.repeat(np.arange(n_traj, dtype=np.int64), horizon)
    flat_s = states.reshape(-1)
    flat_a = actions.reshape(-1)
    return Dataset(
        states=flat_s,
        actions=flat_a,
        rewards=mdp.reward[flat_s, flat_a],
        costs=mdp.cost[flat_s, flat_a],
        next_states=nexts.reshape(-1),
        steps=steps,
        episodes=episodes,
        n_trajectories=n_traj,
        horizon=horizon,
        gamma=mdp.gamma,
    )


def build_mle_model(dataset: Dataset, n_states: int, n_actions: int,
                    gamma: Optional[float] = None) -> MleModel:
    """Count-based empirical model. gamma defaults to the dataset's own."""
    if gamma is None:
        gamma = dataset.gamma
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot build a model from an empty dataset")
    pair = dataset.states * n_actions + dataset.actions
    counts_sa = np.bincount(pair, minlength=n_states * n_actions).reshape(n_states, n_actions)
    counts_sas = np.bincount(pair * n_states + dataset.next_states,
                             minlength=n_states * n_actions * n_states)
    counts_sas = counts_sas.reshape(n_states, n_actions, n_states).astype(float)
    counts_sa_f = counts_sa.astype(float)
    support = counts_sa > 0

    t_hat = np.full((n_states, n_actions, n_states), 1.0 / n_states)
    t_hat[support] = counts_sas[support] / counts_sa_f[support][:, None]

    d_sa = counts_sa_f / n
    counts_s = counts_sa_f.sum(axis=1)
    pi_rows = np.full((n_states, n_actions), 1.0 / n_actions)
    visited = counts_s > 0
    pi_rows[visited] = counts_sa_f[visited] / counts_s[visited][:, None]

    reward_hat = np.zeros((n_states, n_actions))
    cost_hat = np.zeros((n_states, n_actions))
    np.add.at(reward_hat, (dataset.states, dataset.actions), dataset.rewards)
    np.add.at(cost_hat, (dataset.states, dataset.actions), dataset.costs)
    reward_hat[support] /= counts_sa_f[support]
    cost_hat[support] /= counts_sa_f[support]

    start = dataset.states[dataset.steps == 0]
    p0_hat = np.bincount(start, minlength=n_states).astype(float) / dataset.n_trajectories

    return MleModel(
        transition_hat=t_hat,
        d_D=d_sa,
        d_D_state=d_sa.sum(axis=1),
        pi_D=TabularPolicy(pi_rows),
        p0_hat=p0_hat,
        support_mask=support,
        reward_hat=reward_hat,
        cost_hat=cost_hat,
        gamma=gamma,
    )


# --- JSON serialization -----------------------------------------------------
#
# Layouts are versioned; arrays are nested lists in row-major order.

def mdp_to_json(mdp: TabularMdp) -> str:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "tabular_mdp",
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "cost": mdp.cost.tolist(),
        "p0": mdp.p0.tolist(),
        "gamma": mdp.gamma,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def mdp_from_json(text: str) -> TabularMdp:
    payload = json.loads(text)
    if payload.get("kind") != "tabular_mdp":
        raise ValueError(f"not a tabular_mdp document: kind={payload.get('kind')!r}")
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {payload.get('schema_version')!r}")
    mdp = TabularMdp(
        transition=np.asarray(payload["transition"], float),
        reward=np.asarray(payload["reward"], float),
        p0=np.asarray(payload["p0"], float),
        gamma=float(payload["gamma"]),
        cost=np.asarray(payload["cost"], float),
    )
    if mdp.n_states != payload["n_states"] or mdp.n_actions != payload["n_actions"]:
        raise ValueError("declared n_states/n_actions disagree with array shapes")
    return mdp


def dataset_to_json(dataset: Dataset) -> str:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "dataset",
        "n_trajectories": dataset.n_trajectories,
        "horizon": dataset.horizon,
        "gamma": dataset.gamma,
        "transitions": [
            {"s": int(s), "a": int(a), "r": float(r), "c": float(c),
             "s_next": int(s2), "t": int(t), "episode": int(ep)}
            for s, a, r, c, s2, t, ep in zip(
                dataset.states, dataset.actions, dataset.rewards, dataset.costs,
                dataset.next_states, dataset.steps, dataset.episodes)
        ],
    }
    return json.dumps(payload, sort_keys=True)


def dataset_from_json(text: str) -> Dataset:
    payload = json.loads(text)
    if payload.get("kind") != "dataset":
        raise ValueError(f"not a dataset document: kind={payload.get('kind')!r}")
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {payload.get('schema_version')!r}")
    rec = payload["transitions"]
    return Dataset(
        states=np.array([r["s"] for r in rec], dtype=np.int64),
        actions=np.array([r["a"] for r in rec], dtype=np.int64),
        rewards=np.array([r["r"] for r in rec], dtype=float),
        costs=np.array([r["c"] for r in rec], dtype=float),
        next_states=np.array([r["s_next"] for r in rec], dtype=np.int64),
        steps=np.array([r["t"] for r in rec], dtype=np.int64),
        episodes=np.array([r["episode"] for r in rec], dtype=np.int64),
        n_trajectories=int(payload["n_trajectories"]),
        horizon=int(payload["horizon"]),
        gamma=float(payload["gamma"]),
    )
