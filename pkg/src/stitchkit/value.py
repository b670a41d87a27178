"""Twin state-value function V(s) = min(V1(s), V2(s)) fitted by TD regression.

Both networks regress on r + gamma * (1 - done) * min(V1'(s'), V2'(s')) where
the primed networks are hard-copied targets. Network outputs are in units of
``value_scale`` so that targets of very different magnitudes train at the
same learning rate.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from stitchkit import nn
from stitchkit.data import Dataset, input_stats
from stitchkit.errors import ConfigurationError, TrainingFault

log = logging.getLogger(__name__)

DIVERGENCE_FLOOR = 1e-2


@dataclass
class ValueConfig:
    hidden: tuple = (256, 256)
    learning_rate: float = 3e-4
    batch_size: int = 256
    gamma: float = 0.99
    steps: int = 100_000
    target_period: int = 1000
    divergence_window: int = 1000
    divergence_factor: float = 10.0
    seed: int = 0


@dataclass
class TwinValue:
    v1: nn.Network
    v2: nn.Network
    gamma: float
    state_mean: np.ndarray
    state_std: np.ndarray
    value_scale: float = 1.0
    loss_history: list = field(default_factory=list)

    def _x(self, states):
        return (np.atleast_2d(np.asarray(states, dtype=float)) - self.state_mean) / self.state_std

    def branches(self, states) -> tuple[np.ndarray, np.ndarray]:
        x = self._x(states)
        return (nn.forward(self.v1, x)[:, 0] * self.value_scale,
                nn.forward(self.v2, x)[:, 0] * self.value_scale)

    def values(self, states) -> np.ndarray:
        a, b = self.branches(states)
        return np.minimum(a, b)

    def value(self, s) -> float:
        return float(self.values(np.asarray(s, dtype=float)[None, :])[0])

    def __call__(self, states) -> np.ndarray:
        return self.values(states)

    def to_dict(self) -> dict:
        return {
            "v1": self.v1.to_dict(),
            "v2": self.v2.to_dict(),
            "gamma": self.gamma,
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "value_scale": self.value_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TwinValue:
        return cls(
            nn.Network.from_dict(d["v1"]),
            nn.Network.from_dict(d["v2"]),
            float(d["gamma"]),
            np.array(d["state_mean"]),
            np.array(d["state_std"]),
            float(d.get("value_scale", 1.0)),
        )


def value(model: TwinValue, s) -> float:
    return model.value(s)


def value_scale_for(dataset: Dataset, gamma: float) -> float:
    """Rough magnitude of returns: max |r| times the effective horizon."""
    max_r = float(np.abs(dataset.rewards).max()) if dataset.n_transitions else 1.0
    horizon = dataset.n_transitions / max(len(dataset), 1)
    if gamma < 1.0:
        horizon = min(horizon, 1.0 / (1.0 - gamma))
    return max(max_r * max(horizon, 1.0), 1e-6)


def train_value(dataset: Dataset, config: ValueConfig | None = None) -> TwinValue:
    cfg = config or ValueConfig()
    if not 0.0 < cfg.gamma <= 1.0:
        raise ConfigurationError("gamma must lie in (0, 1]")
    if dataset.n_transitions == 0:
        raise ConfigurationError("cannot fit a value function to an empty dataset")
    mean, std = input_stats(dataset)
    scale = value_scale_for(dataset, cfg.gamma)
    rng = np.random.default_rng([cfg.seed, 5])
    sizes = nn.mlp_sizes(dataset.d_s, cfg.hidden, 1)
    model = TwinValue(nn.init_network(sizes, rng), nn.init_network(sizes, rng), cfg.gamma, mean, std, scale)
    targets = [model.v1.copy(), model.v2.copy()]
    opts = [nn.Adam(cfg.learning_rate), nn.Adam(cfg.learning_rate)]

    x = model._x(dataset.states)
    x_next = model._x(dataset.next_states)
    r = dataset.rewards / scale
    live = 1.0 - dataset.dones.astype(float)
    n = len(x)
    recent = deque(maxlen=cfg.divergence_window)
    best = np.inf

    for step in range(cfg.steps):
        if step and step % cfg.target_period == 0:
            targets = [model.v1.copy(), model.v2.copy()]
        idx = rng.integers(0, n, size=cfg.batch_size)
        nxt = np.minimum(nn.forward(targets[0], x_next[idx]), nn.forward(targets[1], x_next[idx]))[:, 0]
        y = r[idx] + cfg.gamma * live[idx] * nxt
        loss = 0.0
        for net, opt in zip((model.v1, model.v2), opts):
            pred, cache = nn.forward_cached(net, x[idx])
            diff = pred[:, 0] - y
            loss += float(np.mean(diff * diff))
            grads, _ = nn.backward_cached(net, cache, (2.0 * diff / len(idx))[:, None])
            opt.step(net, grads)
        if not np.isfinite(loss):
            raise TrainingFault(f"non-finite value loss at step {step}")
        recent.append(loss)
        if (step + 1) % cfg.divergence_window == 0:
            # losses are in value_scale units, so anything under the floor is harmless
            med = float(np.median(recent))
            if med > cfg.divergence_factor * best and med > DIVERGENCE_FLOOR:
                raise TrainingFault(f"value training diverged at step {step}: median loss {med:.4g}")
            best = min(best, med)
        if step % 1000 == 0:
            model.loss_history.append(loss)
            log.debug("value step %d: loss %.6f", step, loss)
    model.v1.meta.update(seed=cfg.seed, steps=cfg.steps)
    model.v2.meta.update(seed=cfg.seed, steps=cfg.steps)
    return model
