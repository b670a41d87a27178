"""Behavioural cloning: deterministic, Gaussian and value-weighted variants."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from stitchkit import nn
from stitchkit.data import Dataset, input_stats
from stitchkit.errors import ConfigurationError, TrainingFault

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)


@dataclass
class BCConfig:
    hidden: tuple = (256, 256)
    learning_rate: float = 1e-3
    batch_size: int = 256
    steps: int = 30_000
    checkpoint_start: int = 10_000
    checkpoint_every: int = 10_000
    action_bounds: tuple | None = None
    seed: int = 0

    def checkpoint_steps(self) -> list[int]:
        steps = list(range(self.checkpoint_start, self.steps + 1, self.checkpoint_every))
        if not steps or steps[-1] != self.steps:
            steps.append(self.steps)
        return steps


FULL_BC = BCConfig(steps=100_000, checkpoint_start=40_000, checkpoint_every=10_000)


@dataclass
class Policy:
    net: nn.Network
    variant: str  # "deterministic" | "gaussian"
    action_bounds: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray

    def _x(self, states):
        return (np.atleast_2d(np.asarray(states, dtype=float)) - self.state_mean) / self.state_std

    def distribution(self, states):
        """Gaussian ``(mean, log_std)``; deterministic policies report log_std = -inf."""
        out = nn.forward(self.net, self._x(states))
        if self.variant == "gaussian":
            return out
        return out, np.full_like(out, -np.inf)

    def act(self, states, mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
        single = np.asarray(states).ndim == 1
        if self.variant == "deterministic":
            a = nn.forward(self.net, self._x(states))
        else:
            mean, log_std = nn.forward(self.net, self._x(states))
            if mode == "mean":
                a = mean
            elif mode == "sample":
                if rng is None:
                    raise ConfigurationError("sample mode needs an rng")
                a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            else:
                raise ConfigurationError(f"unknown action mode {mode!r}")
            a = np.clip(a, -self.action_bounds, self.action_bounds)
        return a[0] if single else a

    def __call__(self, states) -> np.ndarray:
        return self.act(states)

    def log_prob(self, states, actions) -> np.ndarray:
        if self.variant != "gaussian":
            raise ConfigurationError("log_prob needs a gaussian policy")
        mean, log_std = nn.forward(self.net, self._x(states))
        z = (np.atleast_2d(actions) - mean) * np.exp(-log_std)
        return -0.5 * np.sum(z * z, axis=1) - np.sum(log_std, axis=1) - 0.5 * mean.shape[1] * LOG_2PI

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "net": self.net.to_dict(),
            "action_bounds": self.action_bounds.tolist(),
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Policy:
        return cls(nn.Network.from_dict(d["net"]), d["variant"], np.array(d["action_bounds"]),
                   np.array(d["state_mean"]), np.array(d["state_std"]))


def act(policy: Policy, s, mode: str = "mean", rng=None) -> np.ndarray:
    return policy.act(s, mode, rng)


@dataclass
class BCTrainLog:
    checkpoints: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    selected: int | None = None
    warning: str | None = None

    def to_dict(self) -> dict:
        return {"checkpoints": self.checkpoints, "scores": self.scores, "losses": self.losses,
                "selected": self.selected, "warning": self.warning}


def _setup(dataset: Dataset, cfg: BCConfig, variant: str):
    if dataset.n_transitions == 0:
        raise ConfigurationError("cannot clone an empty dataset")
    mean, std = input_stats(dataset)
    if cfg.action_bounds is not None:
        bounds = np.broadcast_to(np.asarray(cfg.action_bounds, dtype=float), (dataset.d_a,)).copy()
    else:
        bounds = np.maximum(np.abs(dataset.actions).max(axis=0), 1e-6)
    rng = np.random.default_rng([cfg.seed, 6])
    if variant == "deterministic":
        net = nn.init_network(nn.mlp_sizes(dataset.d_s, cfg.hidden, dataset.d_a), rng, head="tanh", scale=bounds)
    else:
        net = nn.init_network(nn.mlp_sizes(dataset.d_s, cfg.hidden, 2 * dataset.d_a), rng, head="gaussian")
    return Policy(net, variant, bounds, mean, std), rng


def _fit(policy: Policy, dataset: Dataset, cfg: BCConfig, rng, weights=None, evaluator=None):
    x = policy._x(dataset.states)
    a = dataset.actions
    n = len(x)
    opt = nn.Adam(cfg.learning_rate)
    checkpoints = set(cfg.checkpoint_steps())
    train_log = BCTrainLog()
    snapshots = []
    loss = np.nan
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        out, cache = nn.forward_cached(policy.net, x[idx])
        if policy.variant == "deterministic":
            diff = out - a[idx]
            w = np.ones(len(idx)) if weights is None else weights[idx]
            loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
            upstream = 2.0 * diff * w[:, None] / len(idx)
        else:
            mean, log_std = out
            inv_var = np.exp(-2.0 * log_std)
            diff = mean - a[idx]
            sq = diff * diff * inv_var
            loss = float(np.mean(np.sum(0.5 * sq + log_std, axis=1) + 0.5 * a.shape[1] * LOG_2PI))
            upstream = (diff * inv_var / len(idx), (1.0 - sq) / len(idx))
        if not np.isfinite(loss):
            raise TrainingFault(f"non-finite BC loss at step {step}")
        grads, _ = nn.backward_cached(policy.net, cache, upstream)
        opt.step(policy.net, grads)
        if step in checkpoints:
            train_log.checkpoints.append(step)
            train_log.losses.append(loss)
            snapshots.append(policy.net.copy())
    final = len(snapshots) - 1
    if evaluator is None:
        train_log.selected = train_log.checkpoints[final]
        return policy, train_log
    try:
        for snap in snapshots:
            candidate = Policy(snap, policy.variant, policy.action_bounds, policy.state_mean, policy.state_std)
            train_log.scores.append(float(evaluator(candidate)))
    except Exception as exc:  # evaluator is user code
        train_log.warning = f"evaluator failed ({exc}); using the final checkpoint"
        warnings.warn(train_log.warning, RuntimeWarning, stacklevel=3)
        train_log.scores = []
        train_log.selected = train_log.checkpoints[final]
        return policy, train_log
    best = int(np.argmax(train_log.scores))
    train_log.selected = train_log.checkpoints[best]
    policy.net.load_params(snapshots[best])
    return policy, train_log


def train_bc(dataset: Dataset, config: BCConfig | None = None, evaluator=None) -> tuple[Policy, BCTrainLog]:
    """Deterministic BC; the checkpoint with the best ``evaluator(policy)`` score is kept."""
    cfg = config or BCConfig()
    policy, rng = _setup(dataset, cfg, "deterministic")
    return _fit(policy, dataset, cfg, rng, evaluator=evaluator)


def train_bc_gaussian(dataset: Dataset, config: BCConfig | None = None, evaluator=None) -> Policy:
    cfg = config or BCConfig()
    policy, rng = _setup(dataset, cfg, "gaussian")
    policy, _ = _fit(policy, dataset, cfg, rng, evaluator=evaluator)
    return policy


def weights_from_values(values, delta: float = 1e-3) -> np.ndarray:
    """V shifted to be positive (V - min V + delta), rescaled to mean 1."""
    v = np.asarray(values, dtype=float)
    w = v - v.min() + delta
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ConfigurationError("value weights are all zero")
    return w / w.mean()


def train_weighted_bc(dataset: Dataset, value_model, config: BCConfig | None = None, evaluator=None,
                      delta: float = 1e-3) -> tuple[Policy, BCTrainLog]:
    """BC with per-sample weights derived from ``value_model`` (``.values`` or a callable)."""
    cfg = config or BCConfig()
    values_of = getattr(value_model, "values", value_model)
    weights = weights_from_values(values_of(dataset.states), delta)
    policy, rng = _setup(dataset, cfg, "deterministic")
    return _fit(policy, dataset, cfg, rng, weights=weights, evaluator=evaluator)
