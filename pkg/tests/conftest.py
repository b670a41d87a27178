import numpy as np
import pytest

from stitchkit.data import Dataset, Trajectory
from stitchkit.envs import ExpertPolicy, MixtureSpec, PointMassEnv, generate_mixture_dataset


def chain_trajectory(traj_id, states, actions=None, rewards=None, d_a=1):
    """Trajectory through ``states`` (n+1 rows); done on the last transition."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    n = len(states) - 1
    actions = np.zeros((n, d_a)) if actions is None else np.asarray(actions, dtype=float).reshape(n, -1)
    rewards = np.zeros(n) if rewards is None else np.asarray(rewards, dtype=float)
    dones = np.zeros(n, dtype=bool)
    dones[-1] = True
    return Trajectory(traj_id, states[:-1], actions, rewards, states[1:], dones)


def random_dataset(rng, n_traj=5, length=6, d_s=2, d_a=1, scale=1.0):
    trajs = []
    for i in range(n_traj):
        states = rng.normal(size=(length + 1, d_s)) * scale
        trajs.append(chain_trajectory(i, states, rng.normal(size=(length, d_a)), rng.normal(size=length), d_a))
    return Dataset(trajs, d_s, d_a)


def brute_force_candidates(dataset, s, s_next, eps, exclude=None):
    """Double loop over every state occurrence; returns {(traj, step): distance}."""
    out = {}
    for tr in dataset.trajectories:
        n = len(tr)
        for p in range(n + 1):
            u = tr.state_at(p)
            if p < n and np.sqrt(np.sum((u - s) ** 2)) <= eps:
                key = (tr.traj_id, p + 1)
                d = float(np.sqrt(np.sum((u - s) ** 2)))
                out[key] = min(out.get(key, np.inf), d)
            if np.sqrt(np.sum((u - s_next) ** 2)) <= eps:
                key = (tr.traj_id, p)
                d = float(np.sqrt(np.sum((u - s_next) ** 2)))
                out[key] = min(out.get(key, np.inf), d)
    if exclude is not None:
        out.pop(tuple(exclude), None)
    return out


@pytest.fixture(scope="session")
def env():
    return PointMassEnv()


@pytest.fixture(scope="session")
def expert(env):
    return ExpertPolicy(env)


@pytest.fixture(scope="session")
def small_mixture(env, expert):
    return generate_mixture_dataset(env, expert, MixtureSpec(10.0, 30, 0.5), np.random.default_rng(7))


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
