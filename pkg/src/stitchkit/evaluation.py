"""Policy evaluation on the toy env: returns, trajectory KL to the expert, action MSE."""

from __future__ import annotations

import warnings

import numpy as np

from stitchkit.envs import ExpertPolicy, PointMassEnv


def _actions(policy, states):
    if hasattr(policy, "act"):
        return policy.act(states, mode="mean")
    return policy(states)


def episode_returns(env: PointMassEnv, policy, starts) -> np.ndarray:
    """Undiscounted returns of ``policy`` from each row of ``starts`` (batched rollout)."""
    s = np.array(starts, dtype=float)
    total = np.zeros(len(s))
    for _ in range(env.horizon):
        s, r = env.step(s, _actions(policy, s))
        total += r
    return total


def evaluate_policy(env: PointMassEnv, policy, episodes: int = 10, seeds: int = 5, base_seed: int = 0):
    """Mean over seeds of the mean episode return, and the std of the per-seed means."""
    means = []
    for i in range(seeds):
        rng = np.random.default_rng([base_seed, 7, i])
        means.append(float(episode_returns(env, policy, env.reset(rng, episodes)).mean()))
    return float(np.mean(means)), float(np.std(means))


def expert_rollout_states(env: PointMassEnv, expert: ExpertPolicy, episodes: int = 10, seed: int = 0,
                          stochastic: bool = False):
    """States (and the expert's actions) visited by expert rollouts."""
    rng = np.random.default_rng([seed, 8])
    s = env.reset(rng, episodes)
    states, actions = [], []
    for _ in range(env.horizon):
        a = expert.sample(s, rng) if stochastic else expert(s)
        states.append(s)
        actions.append(a)
        s, _ = env.step(s, a)
    return np.concatenate(states), np.concatenate(actions)


def kl_divergence_estimate(expert: ExpertPolicy, policy, env: PointMassEnv, episodes: int = 10, seed: int = 0):
    """Monte-Carlo E_{s~expert, a~expert(s)}[log expert(a|s) - log policy(a|s)] and its standard error."""
    states, actions = expert_rollout_states(env, expert, episodes, seed, stochastic=True)
    diffs = expert.log_prob(states, actions) - policy.log_prob(states, actions)
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(len(diffs)))


def action_mse(expert, policy, states) -> float:
    """Mean over states of the squared distance between expert and policy actions."""
    states = np.atleast_2d(states)
    diff = _actions(expert, states) - _actions(policy, states)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def scaled_kl_difference(bc_kls, tsbc_kls) -> np.ndarray:
    """Min-max scale both series jointly to [0, 1], then BC minus TS+BC per entry."""
    bc = np.asarray(bc_kls, dtype=float)
    ts = np.asarray(tsbc_kls, dtype=float)
    if bc.shape != ts.shape:
        raise ValueError("both KL series must cover the same fractions")
    pooled = np.concatenate([bc, ts])
    lo, hi = pooled.min(), pooled.max()
    if not hi > lo:
        warnings.warn("constant KL series; scaled difference is zero", RuntimeWarning, stacklevel=2)
        return np.zeros_like(bc)
    return (bc - lo) / (hi - lo) - (ts - lo) / (hi - lo)
