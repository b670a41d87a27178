import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stitchkit import nn
from stitchkit.data import Dataset
from stitchkit.dynamics import DynamicsEnsemble
from stitchkit.errors import ConfigurationError, StitchkitError
from stitchkit.stitch import (StitchConfig, StitchModels, StitchRunError, accept_or_reject, run_ts,
                              stitch_trajectory, trajectory_rng)

from conftest import brute_force_candidates, chain_trajectory, random_dataset


# -- oracle models for the toy MDP s' = s + a, r = -|y'| ----------------------------


class MeanStepDynamics:
    """Behaviour density: next state ~ N(s + (1, 0), I); five identical elites."""

    def log_density(self, s, next_states):
        diff = np.atleast_2d(next_states) - (np.asarray(s) + np.array([1.0, 0.0]))
        ll = -0.5 * np.sum(diff ** 2, axis=1) - np.log(2 * np.pi)
        return np.tile(ll, (5, 1))


class ExactInverse:
    def generate_action(self, s, s_next, rng, latent_mode="sample"):
        return np.asarray(s_next) - np.asarray(s)


class TrueReward:
    def predict_reward(self, s, a, s_next, rng):
        return -abs(float(s_next[1]))


class ReturnToGo:
    """Exact value of each dataset state under its own trajectory (gamma = 1)."""

    def __init__(self, dataset):
        self.table = {}
        for tr in dataset.trajectories:
            v = 0.0
            self.table[tuple(tr.state_at(len(tr)))] = 0.0
            for t in range(len(tr) - 1, -1, -1):
                v += tr.rewards[t]
                key = tuple(tr.states[t])
                assert self.table.get(key, v) == v  # shared states must agree
                self.table[key] = v

    def values(self, states):
        return np.array([self.table[tuple(s)] for s in np.atleast_2d(states)])


def toy_trajectory(traj_id, states):
    states = np.asarray(states, dtype=float)
    actions = states[1:] - states[:-1]
    rewards = -np.abs(states[1:, 1])
    return chain_trajectory(traj_id, states, actions, rewards, d_a=2)


def micro_dataset():
    return Dataset([
        toy_trajectory(0, [[0, 0], [1, 1], [2, 2], [3, 3]]),       # drifts away, return -6
        toy_trajectory(1, [[0, 0.2], [1, 0], [2, 1], [3, 2]]),     # passes close to A's start
        toy_trajectory(2, [[1, 0.2], [2, 0], [3, 0]]),             # the good continuation
        toy_trajectory(3, [[0, -0.2], [1, -1.5], [2, 0], [3, 0]]),  # high value, but too far to reach
    ], 2, 2)


def oracle_models(ds):
    return StitchModels(MeanStepDynamics(), ExactInverse(), TrueReward(), ReturnToGo(ds))


def test_oracle_micro_dataset_reproduces_hand_computed_splice():
    ds = micro_dataset()
    out, events = stitch_trajectory(ds.by_id(0), ds, oracle_models(ds), StitchConfig(epsilon=0.5),
                                    np.random.default_rng(0))
    # A's start -> B's (1, 0) -> C's (2, 0) -> C's terminal (3, 0)
    assert np.array_equal(out.states, [[0, 0], [1, 0], [2, 0]])
    assert np.array_equal(out.next_states, [[1, 0], [2, 0], [3, 0]])
    assert np.array_equal(out.actions, [[1, 0], [1, 0], [1, 0]])
    assert np.array_equal(out.rewards, [0, 0, 0])
    assert out.dones.tolist() == [False, False, True]
    assert [(e.source, e.target) for e in events] == [((0, 0), (1, 1)), ((1, 1), (2, 1))]
    assert [e.margin for e in events] == pytest.approx([0.5, 0.5])
    assert [e.value_gain for e in events] == pytest.approx([2.0, 2.0])


def test_oracle_run_accepts_splice_and_keeps_the_rest():
    ds = micro_dataset()
    models = oracle_models(ds)
    out, report = run_ts(ds, StitchConfig(epsilon=0.5, iterations=1), models=models,
                         value_fn=lambda d, k: ReturnToGo(ds))
    assert out.by_id(0).total_reward == 0.0
    assert len(out) == len(ds)
    assert report.iterations[0].accepted >= 1


def test_accept_or_reject_examples():
    orig = chain_trajectory(0, [0.0, 1.0], rewards=[10.0])
    worse = chain_trajectory(1, [0.0, 1.0], rewards=[10.9])
    better = chain_trajectory(2, [0.0, 1.0], rewards=[11.1])
    assert accept_or_reject(orig, worse, 0.1) is orig
    assert accept_or_reject(orig, better, 0.1) is better
    neg = chain_trajectory(3, [0.0, 1.0], rewards=[-10.0])
    cand = chain_trajectory(4, [0.0, 1.0], rewards=[-9.5])
    assert accept_or_reject(neg, cand, 0.1) is cand
    assert accept_or_reject(neg, chain_trajectory(5, [0.0, 1.0], rewards=[-11.0]), 0.1) is neg
    assert accept_or_reject(orig, better, math.inf) is orig


def test_accept_needs_nonempty_trajectories():
    class Empty:
        total_reward = 0.0

        def __len__(self):
            return 0

    empty = Empty()
    with pytest.raises(ConfigurationError):
        accept_or_reject(empty, chain_trajectory(1, [0.0, 1.0]), 0.1)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        StitchConfig(accept_threshold=-0.1)
    with pytest.raises(ConfigurationError):
        StitchConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        StitchConfig(epsilon=-1.0)
    assert StitchConfig().iterations == 5 and StitchConfig().accept_threshold == 0.1


def test_single_trajectory_without_neighbours_is_unchanged():
    tr = toy_trajectory(0, [[0, 0], [1, 1], [2, 2]])
    ds = Dataset([tr], 2, 2)
    out, events = stitch_trajectory(tr, ds, oracle_models(ds), StitchConfig(epsilon=0.1), np.random.default_rng(0))
    assert events == [] and out == tr


def test_identical_twins_produce_no_events():
    states = [[0, 0], [1, 0.5], [2, 0.1], [3, 0.0]]
    ds = Dataset([toy_trajectory(0, states), toy_trajectory(1, states)], 2, 2)
    models = oracle_models(ds)
    for tr in ds.trajectories:
        out, events = stitch_trajectory(tr, ds, models, StitchConfig(epsilon=0.5), np.random.default_rng(0))
        assert events == [] and out == tr


def test_dimension_mismatch_rejected():
    ds = micro_dataset()
    with pytest.raises(ConfigurationError):
        stitch_trajectory(chain_trajectory(9, [0.0, 1.0]), ds, oracle_models(ds), StitchConfig(epsilon=0.5),
                          np.random.default_rng(0))


class TableValue:
    def __init__(self, table, default=0.0):
        self.table, self.default = table, default

    def values(self, states):
        return np.array([self.table.get(tuple(s), self.default) for s in np.atleast_2d(states)])


def test_revisit_stops_stitching():
    # at step 1 the best reachable candidate is the walk's own start state; jumping there would loop
    tr = toy_trajectory(0, [[0, 0], [1, 0], [-0.3, 0.1], [0.7, 0]])
    ds = Dataset([tr], 2, 2)
    models = StitchModels(MeanStepDynamics(), ExactInverse(), TrueReward(), TableValue({(0.0, 0.0): 5.0}))
    out, events = stitch_trajectory(tr, ds, models, StitchConfig(epsilon=0.5), np.random.default_rng(0))
    assert events == [] and out == tr


def test_infinite_threshold_returns_input_exactly():
    ds = micro_dataset()
    out, report = run_ts(ds, StitchConfig(epsilon=0.5, accept_threshold=math.inf, iterations=2),
                         models=oracle_models(ds), value_fn=lambda d, k: ReturnToGo(ds))
    assert out == ds
    assert all(it.accepted == 0 for it in report.iterations)


def test_max_stitches_blocks_long_splices():
    ds = micro_dataset()
    out, report = run_ts(ds, StitchConfig(epsilon=0.5, iterations=1, max_stitches=1), models=oracle_models(ds),
                         value_fn=lambda d, k: ReturnToGo(ds))
    assert out.by_id(0) == ds.by_id(0)
    assert all(len([e for e in report.events if e.traj_id == t and e.accepted]) <= 1 for t in range(4))


def test_missing_model_is_configuration_error():
    ds = micro_dataset()
    with pytest.raises(ConfigurationError):
        run_ts(ds, StitchConfig(epsilon=0.5), models=StitchModels(MeanStepDynamics(), None, TrueReward()),
               value_fn=lambda d, k: ReturnToGo(ds))


def test_iteration_failure_keeps_partial_report():
    ds = micro_dataset()

    def value_fn(d, k):
        if k == 2:
            raise StitchkitError("boom")
        return ReturnToGo(ds)

    with pytest.raises(StitchRunError) as info:
        run_ts(ds, StitchConfig(epsilon=0.5, iterations=3), models=oracle_models(ds), value_fn=value_fn)
    assert len(info.value.report.iterations) == 1


def test_trajectory_rng_streams_are_independent():
    a = trajectory_rng(1, 2, 3).random(4)
    assert np.array_equal(a, trajectory_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, trajectory_rng(1, 2, 4).random(4))
    assert not np.array_equal(a, trajectory_rng(1, 3, 3).random(4))


# -- randomised models: independent reference walk and invariants --------------------


class NoisyInverse:
    def generate_action(self, s, s_next, rng, latent_mode="sample"):
        return np.asarray(s_next - s)[:1] + 0.1 * rng.normal(size=1)


class NoisyReward:
    def predict_reward(self, s, a, s_next, rng):
        return float(-np.linalg.norm(s_next) + 0.1 * rng.normal())


class DistanceValue:
    def values(self, states):
        return -np.linalg.norm(np.atleast_2d(states) - np.array([1.0, 1.0]), axis=1)


def random_models(seed):
    rng = np.random.default_rng(seed)
    members = [nn.init_network([2, 8, 4], rng, head="gaussian") for _ in range(4)]
    for m in members:
        m.biases[-1][2:] += 0.5  # wide enough that densities do not underflow
    dyn = DynamicsEnsemble(members, [0, 2, 3], np.zeros(2), np.ones(2))
    return StitchModels(dyn, NoisyInverse(), NoisyReward(), DistanceValue())


def reference_walk(traj, ds, models, eps, rng):
    """Direct transcription in the density domain with brute-force candidates."""
    cur, pos = traj, 0
    visited = {(cur.traj_id, 0)}
    stitching = True
    states, actions, rewards = [], [], []
    while pos < len(cur):
        s, s2 = cur.states[pos], cur.next_states[pos]
        best = None
        if stitching:
            cands = brute_force_candidates(ds, s, s2, eps, exclude=(cur.traj_id, pos + 1))
            v_obs = models.value.values(s2)[0]
            for key in sorted(cands):
                u = ds.by_id(key[0]).state_at(key[1])
                p_cand = [np.exp(models.dynamics.log_density_member(i, s, u)) for i in models.dynamics.elites]
                p_obs = [np.exp(models.dynamics.log_density_member(i, s, s2)) for i in models.dynamics.elites]
                v = models.value.values(u)[0]
                if min(p_cand) > np.mean(p_obs) and v > v_obs and (best is None or v > best[1]):
                    best = (key, v, u)
        if best is not None and best[0] in visited:
            stitching = False
            best = None
        if best is not None:
            a = models.inverse.generate_action(s, best[2], rng)
            r = models.reward.predict_reward(s, a, best[2], rng)
            states.append(s), actions.append(a), rewards.append(r)
            cur, pos = ds.by_id(best[0][0]), best[0][1]
            visited.add(best[0])
            continue
        states.append(s), actions.append(cur.actions[pos]), rewards.append(cur.rewards[pos])
        pos += 1
        visited.add((cur.traj_id, pos))
    return np.array(states), np.array(actions), np.array(rewards)


def _log_density_member(ens):
    def f(i, s, y):
        mu, ls = nn.forward(ens.members[i], (np.asarray(s) - ens.state_mean) / ens.state_std)
        z = ((np.asarray(y) - ens.state_mean) / ens.state_std - mu) / np.exp(ls)
        return float(np.sum(-0.5 * z * z - ls - 0.5 * np.log(2 * np.pi)))
    return f


@pytest.mark.parametrize("seed", range(6))
def test_walk_matches_reference(seed):
    rng = np.random.default_rng(100 + seed)
    ds = random_dataset(rng, n_traj=6, length=6, d_s=2, scale=0.8)
    models = random_models(seed)
    models.dynamics.log_density_member = _log_density_member(models.dynamics)
    cfg = StitchConfig(epsilon=0.6, candidate_cap=None)
    for tr in ds.trajectories:
        out, events = stitch_trajectory(tr, ds, models, cfg, np.random.default_rng(seed))
        s, a, r = reference_walk(tr, ds, models, 0.6, np.random.default_rng(seed))
        assert np.allclose(out.states, s, atol=0, rtol=0)
        assert np.allclose(out.actions, a, atol=1e-12)
        assert np.allclose(out.rewards, r, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_run_ts_invariants(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n_traj=8, length=5, d_s=2, scale=0.8)
    models = random_models(seed)
    cfg = StitchConfig(epsilon=0.7, iterations=3, seed=seed)
    out, report = run_ts(ds, cfg, models=models, value_fn=lambda d, k: DistanceValue())
    states = {s.tobytes() for s in ds.state_index.states}
    assert len(out) == len(ds)
    assert [t.traj_id for t in out.trajectories] == [t.traj_id for t in ds.trajectories]
    for tr in out.trajectories:
        assert all(s.tobytes() in states for s in tr.states)
        assert all(s.tobytes() in states for s in tr.next_states)
    for ev in report.events:
        assert ev.margin > 0 and ev.value_gain > 0
    for it in report.iterations:
        assert 0 <= it.accepted <= it.proposed <= it.n_trajectories
    again, report2 = run_ts(ds, cfg, models=random_models(seed), value_fn=lambda d, k: DistanceValue())
    assert again == out and report2.to_dict() == report.to_dict()


def test_acceptance_rule_holds_for_every_replacement():
    rng = np.random.default_rng(3)
    ds = random_dataset(rng, n_traj=12, length=6, d_s=2, scale=0.8)
    history = [ds]
    out, report = run_ts(ds, StitchConfig(epsilon=0.8, iterations=3), models=random_models(3),
                         value_fn=lambda d, k: DistanceValue(), on_iteration=lambda k, d: history.append(d))
    for before, after in zip(history, history[1:]):
        for old, new in zip(before.trajectories, after.trajectories):
            if new is not old:
                assert new.total_reward > 1.1 * old.total_reward
    assert sum(it.accepted for it in report.iterations) > 0


def test_workers_do_not_change_results():
    rng = np.random.default_rng(4)
    ds = random_dataset(rng, n_traj=10, length=6, d_s=2, scale=0.8)
    one, r1 = run_ts(ds, StitchConfig(epsilon=0.8, iterations=2, workers=1), models=random_models(4),
                     value_fn=lambda d, k: DistanceValue())
    four, r4 = run_ts(ds, StitchConfig(epsilon=0.8, iterations=2, workers=4), models=random_models(4),
                      value_fn=lambda d, k: DistanceValue())
    assert one == four and r1.to_dict() == r4.to_dict()
