"""Trajectory stitching: splice trajectories together through synthetic actions.

Each trajectory is replayed from its first state. At every step the
neighbourhood candidates for the next state are screened with the dynamics
ensemble (reachability) and the value function (improvement); the best
survivor is reached with a generated action and reward, and the walk carries
on along the candidate's own trajectory. A rebuilt trajectory replaces the
original only if its reward sum beats ``(1 + accept_threshold)`` times the
original's.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from stitchkit.data import Dataset, Trajectory, candidate_rows, default_epsilon
from stitchkit.dynamics import DynamicsConfig, gaussian_log_density, margin_from_log_densities, train_dynamics
from stitchkit.errors import ConfigurationError, StitchkitError
from stitchkit.inverse import CVAEConfig, train_cvae
from stitchkit.reward import WGANConfig, train_wgan
from stitchkit.value import ValueConfig, train_value

log = logging.getLogger(__name__)


@dataclass
class StitchConfig:
    accept_threshold: float = 0.1
    iterations: int = 5
    epsilon: float | None = None  # None: data.default_epsilon of the input dataset
    candidate_cap: int | None = 64
    max_stitches: int | None = None
    latent_mode: str = "sample"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.accept_threshold < 0 or math.isnan(self.accept_threshold):
            raise ConfigurationError("accept_threshold must be >= 0")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")


@dataclass
class ModelConfigs:
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    inverse: CVAEConfig = field(default_factory=CVAEConfig)
    reward: WGANConfig = field(default_factory=WGANConfig)
    value: ValueConfig = field(default_factory=ValueConfig)


@dataclass
class StitchModels:
    """Anything with the right methods works here, which is how oracle models are injected.

    dynamics.log_density(s, next_states) -> (n_members, n) log-densities
    inverse.generate_action(s, s_next, rng, latent_mode) -> action
    reward.predict_reward(s, a, s_next, rng) -> float
    value.values(states) -> (n,) values
    """

    dynamics: object
    inverse: object
    reward: object
    value: object = None


@dataclass
class StitchEvent:
    traj_id: int
    source: tuple
    target: tuple
    action: list
    reward: float
    margin: float
    value_gain: float
    iteration: int = 0
    accepted: bool = False


@dataclass
class IterationStats:
    iteration: int
    n_trajectories: int
    proposed: int = 0
    accepted: int = 0
    events_proposed: int = 0
    events_accepted: int = 0
    return_before: float = 0.0
    return_after: float = 0.0
    capped_queries: int = 0


@dataclass
class StitchReport:
    epsilon: float
    candidate_cap: int | None
    accept_threshold: float
    iterations: list = field(default_factory=list)
    events: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "candidate_cap": self.candidate_cap,
            "accept_threshold": self.accept_threshold,
            "iterations": [asdict(it) for it in self.iterations],
            "events": [asdict(ev) for ev in self.events],
            "notes": list(self.notes),
        }


class StitchRunError(StitchkitError, RuntimeError):
    def __init__(self, message: str, report: StitchReport):
        super().__init__(message)
        self.report = report


@dataclass
class _Walk:
    trajectory: Trajectory
    events: list
    capped_queries: int = 0


def _walk(traj: Trajectory, dataset: Dataset, models: StitchModels, eps: float, cap, latent_mode,
          rng: np.random.Generator) -> _Walk:
    index = dataset.state_index
    rows = []
    events = []
    capped = 0
    cur, pos = traj, 0
    visited = {(cur.traj_id, 0)}
    stitching = True
    while pos < len(cur):
        s, a, r, s2, done = cur.states[pos], cur.actions[pos], cur.rewards[pos], cur.next_states[pos], cur.dones[pos]
        chosen = None
        if stitching:
            cand_rows, _, was_capped = candidate_rows(dataset, s, s2, eps, exclude=(cur.traj_id, pos + 1), cap=cap)
            capped += int(was_capped)
            if len(cand_rows):
                cand_states = index.states[cand_rows]
                ll = np.asarray(models.dynamics.log_density(s, np.vstack([s2[None, :], cand_states])))
                margins = margin_from_log_densities(ll[:, 1:], ll[:, 0])
                reachable = np.flatnonzero(margins > 0)
                if len(reachable):
                    vals = np.asarray(models.value.values(np.vstack([s2[None, :], cand_states[reachable]])))
                    v_obs, v_cand = vals[0], vals[1:]
                    better = v_cand > v_obs
                    if better.any():
                        j = int(np.argmax(np.where(better, v_cand, -np.inf)))
                        row = cand_rows[reachable[j]]
                        chosen = (index.states[row], int(index.traj_ids[row]), int(index.steps[row]),
                                  float(margins[reachable[j]]), float(v_cand[j] - v_obs))
        if chosen is not None:
            target, target_id, target_pos, margin, gain = chosen
            key = (target_id, target_pos)
            if key in visited:
                # a revisit would loop; keep the rest of the current trajectory as is
                stitching = False
            else:
                a_new = np.asarray(models.inverse.generate_action(s, target, rng, latent_mode), dtype=float)
                r_new = float(models.reward.predict_reward(s, a_new, target, rng))
                rows.append((s, a_new, r_new, target, False))
                events.append(StitchEvent(traj.traj_id, (cur.traj_id, pos), key, a_new.tolist(), r_new, margin, gain))
                cur, pos = dataset.by_id(target_id), target_pos
                visited.add(key)
                continue
        rows.append((s, a, r, s2, bool(done)))
        pos += 1
        visited.add((cur.traj_id, pos))
        if done:
            break
    new = Trajectory(
        traj.traj_id,
        np.array([row[0] for row in rows]),
        np.array([row[1] for row in rows]),
        np.array([row[2] for row in rows]),
        np.array([row[3] for row in rows]),
        np.array([row[4] for row in rows]),
    )
    return _Walk(new, events, capped)


def stitch_trajectory(traj: Trajectory, dataset: Dataset, models: StitchModels, config: StitchConfig,
                      rng: np.random.Generator, epsilon: float | None = None):
    """Rebuild one trajectory; returns ``(candidate trajectory, events)``."""
    eps = epsilon if epsilon is not None else config.epsilon
    if eps is None:
        eps = default_epsilon(dataset)
    if traj.states.shape[1] != dataset.d_s:
        raise ConfigurationError("trajectory state dimension differs from the dataset")
    walk = _walk(traj, dataset, models, eps, config.candidate_cap, config.latent_mode, rng)
    return walk.trajectory, walk.events


def accept_or_reject(original: Trajectory, candidate: Trajectory, accept_threshold: float) -> Trajectory:
    """Candidate iff its reward sum > (1 + threshold) * original's (signed, verbatim).

    An infinite threshold rejects everything. For negative-return trajectories
    the rule admits candidates up to ``threshold`` worse than the original.
    """
    if len(original) == 0 or len(candidate) == 0:
        raise ConfigurationError("both trajectories must be nonempty")
    if math.isinf(accept_threshold):
        return original
    if candidate.total_reward > (1.0 + accept_threshold) * original.total_reward:
        return candidate
    return original


def trajectory_rng(seed: int, iteration: int, traj_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(iteration), int(traj_id)])


# -- caching wrappers used by run_ts -------------------------------------------


class _CachedDynamics:
    """Memoises elite predictions per conditioning state (states repeat across walks)."""

    def __init__(self, ensemble):
        self.ensemble = ensemble
        self._cache = {}

    def prime(self, states):
        mu, ls = self.ensemble.predict(states)
        for i, s in enumerate(states):
            self._cache[s.tobytes()] = (mu[:, i], ls[:, i])

    def log_density(self, s, next_states):
        key = np.asarray(s, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            mu, ls = self.ensemble.predict(np.asarray(s, dtype=float)[None, :])
            hit = (mu[:, 0], ls[:, 0])
            self._cache[key] = hit
        y = self.ensemble.normalize(np.atleast_2d(next_states))
        return gaussian_log_density(hit[0][:, None, :], hit[1][:, None, :], y[None, :, :])


class _CachedValue:
    def __init__(self, model, states):
        self.model = model
        vals = model.values(states) if len(states) else np.zeros(0)
        self._cache = {s.tobytes(): v for s, v in zip(states, vals)}

    def values(self, states):
        states = np.atleast_2d(states)
        out = np.empty(len(states))
        for i, s in enumerate(states):
            v = self._cache.get(s.tobytes())
            if v is None:
                v = float(self.model.values(s[None, :])[0])
                self._cache[s.tobytes()] = v
            out[i] = v
        return out


def train_models(dataset: Dataset, configs: ModelConfigs, seed: int = 0) -> StitchModels:
    """Fit the dynamics ensemble, inverse model and reward model on the original data."""
    dyn = train_dynamics(dataset, replace(configs.dynamics, seed=seed))
    inv = train_cvae(dataset, replace(configs.inverse, seed=seed))
    rew = train_wgan(dataset, replace(configs.reward, seed=seed))
    return StitchModels(dyn, inv, rew)


def stitch_iteration(dataset: Dataset, models: StitchModels, config: StitchConfig, iteration: int,
                     eps: float) -> tuple[Dataset, IterationStats, list]:
    stats = IterationStats(iteration, len(dataset), return_before=float(dataset.returns().sum()))

    def work(traj):
        return _walk(traj, dataset, models, eps, config.candidate_cap, config.latent_mode,
                     trajectory_rng(config.seed, iteration, traj.traj_id))

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            walks = list(pool.map(work, dataset.trajectories))
    else:
        walks = [work(tr) for tr in dataset.trajectories]

    new_trajs, events = [], []
    for orig, walk in zip(dataset.trajectories, walks):
        stats.capped_queries += walk.capped_queries
        chosen = orig
        if walk.events:
            stats.proposed += 1
            stats.events_proposed += len(walk.events)
            too_many = config.max_stitches is not None and len(walk.events) > config.max_stitches
            if not too_many:
                chosen = accept_or_reject(orig, walk.trajectory, config.accept_threshold)
        accepted = chosen is not orig
        if accepted:
            stats.accepted += 1
            stats.events_accepted += len(walk.events)
        for ev in walk.events:
            ev.iteration = iteration
            ev.accepted = accepted
            events.append(ev)
        new_trajs.append(chosen)
    out = Dataset(new_trajs, dataset.d_s, dataset.d_a, validate=False)
    stats.return_after = float(out.returns().sum())
    return out, stats, events


def run_ts(dataset: Dataset, config: StitchConfig | None = None, model_configs: ModelConfigs | None = None,
           models: StitchModels | None = None, value_fn=None, on_iteration=None):
    """Iterated stitching; returns ``(final dataset, StitchReport)``.

    ``models`` skips training of the fixed models; ``value_fn(dataset, iteration)``
    replaces the per-iteration value refit. ``on_iteration(k, dataset_k)`` is
    called after every iteration.
    """
    config = config or StitchConfig()
    model_configs = model_configs or ModelConfigs()
    eps = config.epsilon if config.epsilon is not None else default_epsilon(dataset)
    report = StitchReport(eps, config.candidate_cap, config.accept_threshold)
    if config.accept_threshold > 0 and (dataset.returns() < 0).any():
        report.notes.append("negative trajectory returns: the (1 + p) rule admits candidates up to p worse")
    if models is None:
        models = train_models(dataset, model_configs, config.seed)
    for name in ("dynamics", "inverse", "reward"):
        if getattr(models, name) is None:
            raise ConfigurationError(f"stitching needs a {name} model")

    if value_fn is None:
        def value_fn(ds, k):
            return train_value(ds, replace(model_configs.value, seed=config.seed * 1000 + k))

    index_states = dataset.state_index.states
    dyn = models.dynamics
    if hasattr(dyn, "predict") and hasattr(dyn, "normalize"):
        dyn = _CachedDynamics(dyn)
        dyn.prime(index_states)

    current = dataset
    for k in range(1, config.iterations + 1):
        try:
            v = value_fn(current, k)
            cached = StitchModels(dyn, models.inverse, models.reward, _CachedValue(v, index_states))
            current, stats, events = stitch_iteration(current, cached, config, k, eps)
        except StitchkitError as exc:
            raise StitchRunError(f"stitching iteration {k} failed: {exc}", report) from exc
        report.iterations.append(stats)
        report.events.extend(events)
        log.info("TS iteration %d: %d/%d proposed trajectories accepted, %d events",
                 k, stats.accepted, stats.proposed, stats.events_accepted)
        if on_iteration is not None:
            on_iteration(k, current)
    return current, report
