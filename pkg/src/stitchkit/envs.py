"""Point-mass toy environment, PD expert, and expert/noisy mixture datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stitchkit.data import Dataset, Trajectory
from stitchkit.errors import ConfigurationError

EXPERT_FRACTIONS = (0.0, 0.1, 2.5, 5.0, 10.0, 20.0, 30.0, 40.0)


@dataclass(frozen=True)
class PointMassEnv:
    """2-D point mass: state [x, y, vx, vy], action [ax, ay] in [-1, 1]^2.

    Works on single states ``(4,)`` or batches ``(n, 4)``.
    """

    dt: float = 0.1
    max_speed: float = 2.0
    horizon: int = 50
    goal: tuple = (1.0, 1.0)
    start_low: float = -1.0
    start_high: float = 0.0
    action_bound: float = 1.0

    d_s = 4
    d_a = 2

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (2,) if n is None else (n, 2)
        pos = rng.uniform(self.start_low, self.start_high, size=shape)
        return np.concatenate([pos, np.zeros_like(pos)], axis=-1)

    def reward(self, next_state) -> np.ndarray:
        next_state = np.asarray(next_state, dtype=float)
        return -np.linalg.norm(next_state[..., :2] - np.asarray(self.goal), axis=-1)

    def step(self, state, action):
        """Returns ``(next_state, reward)``; actions are clipped to the bounds."""
        state = np.asarray(state, dtype=float)
        a = np.clip(np.asarray(action, dtype=float), -self.action_bound, self.action_bound)
        pos, vel = state[..., :2], state[..., 2:]
        new_pos = pos + vel * self.dt
        new_vel = np.clip(vel + a * self.dt, -self.max_speed, self.max_speed)
        nxt = np.concatenate([new_pos, new_vel], axis=-1)
        return nxt, self.reward(nxt)


@dataclass(frozen=True)
class ExpertPolicy:
    """PD controller on position error, clipped to the action bounds."""

    env: PointMassEnv = PointMassEnv()
    kp: float = 2.0
    kd: float = 1.0
    std: float = 0.01

    def __call__(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        err = np.asarray(self.env.goal) - states[..., :2]
        a = self.kp * err - self.kd * states[..., 2:]
        return np.clip(a, -self.env.action_bound, self.env.action_bound)

    def mean_action(self, states) -> np.ndarray:
        return self(states)

    def log_prob(self, states, actions) -> np.ndarray:
        """Log-density of the Gaussian wrapper N(pi*(s), std^2 I)."""
        z = (np.asarray(actions) - self(states)) / self.std
        d = z.shape[-1]
        return -0.5 * np.sum(z * z, axis=-1) - d * np.log(self.std) - 0.5 * d * np.log(2 * np.pi)

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        mean = self(states)
        return mean + self.std * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class MixtureSpec:
    expert_fraction: float = 0.0  # percent
    n_trajectories: int = 200
    noise_std: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.expert_fraction <= 100.0:
            raise ConfigurationError("expert_fraction is a percentage in [0, 100]")
        if self.n_trajectories < 0 or self.noise_std < 0:
            raise ConfigurationError("trajectory count and noise std must be non-negative")

    @property
    def n_expert(self) -> int:
        return int(round(self.n_trajectories * self.expert_fraction / 100.0))


def rollout(env: PointMassEnv, start, act, traj_id: int) -> Trajectory:
    """Run one episode from ``start`` with ``act(state, t) -> action``."""
    states, actions, rewards, nexts = [], [], [], []
    s = np.asarray(start, dtype=float)
    for t in range(env.horizon):
        a = np.clip(act(s, t), -env.action_bound, env.action_bound)
        s2, r = env.step(s, a)
        states.append(s)
        actions.append(a)
        rewards.append(float(r))
        nexts.append(s2)
        s = s2
    dones = np.zeros(env.horizon, dtype=bool)
    dones[-1] = True
    return Trajectory(traj_id, np.array(states), np.array(actions), np.array(rewards), np.array(nexts), dones)


def generate_mixture_dataset(env: PointMassEnv, expert: ExpertPolicy, spec: MixtureSpec,
                             rng: np.random.Generator) -> Dataset:
    """Noisy-expert trajectories with ``spec.expert_fraction`` percent clean expert ones."""
    n = spec.n_trajectories
    is_expert = np.zeros(n, dtype=bool)
    is_expert[rng.permutation(n)[: spec.n_expert]] = True
    starts = env.reset(rng, n) if n else np.zeros((0, env.d_s))
    trajs = []
    for i in range(n):
        noise = rng.standard_normal((env.horizon, env.d_a)) * spec.noise_std
        if is_expert[i]:
            tr = rollout(env, starts[i], lambda s, t: expert(s), i)
        else:
            tr = rollout(env, starts[i], lambda s, t, noise=noise: expert(s) + noise[t], i)
        trajs.append(tr)
    ds = Dataset(trajs, env.d_s, env.d_a)
    ds.expert_ids = sorted(int(i) for i in np.flatnonzero(is_expert))
    return ds
