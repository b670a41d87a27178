"""Ensemble of state-conditioned Gaussian dynamics models p(s'|s).

The models never see actions; they only judge whether a dataset state is at
least as plausible a successor of ``s`` as the one actually observed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stitchkit import nn
from stitchkit.data import Dataset, normalization_stats
from stitchkit.errors import ConfigurationError, TrainingFault

log = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)


@dataclass
class DynamicsConfig:
    hidden: tuple = (200, 200, 200)
    learning_rate: float = 3e-4
    batch_size: int = 256
    ensemble_size: int = 7
    n_elites: int = 5
    max_epochs: int = 200
    patience: int = 10
    holdout_fraction: float = 0.1
    max_steps: int | None = None
    log_std_bounds: tuple = (-10.0, 2.0)
    seed: int = 0


@dataclass
class DynamicsEnsemble:
    members: list
    elites: list
    state_mean: np.ndarray
    state_std: np.ndarray
    holdout_nll: list = field(default_factory=list)

    def __post_init__(self):
        if not set(self.elites) <= set(range(len(self.members))):
            raise ConfigurationError("elite indices must refer to ensemble members")

    @property
    def d_s(self) -> int:
        return self.members[0].in_dim

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.state_mean) / self.state_std

    def predict(self, states, members=None):
        """Normalised-space ``(mean, log_std)`` stacked over ``members`` (default elites)."""
        members = self.elites if members is None else members
        xs = self.normalize(np.atleast_2d(states))
        means, log_stds = [], []
        for i in members:
            mu, ls = nn.forward(self.members[i], xs)
            means.append(mu)
            log_stds.append(ls)
        return np.stack(means), np.stack(log_stds)

    def log_density(self, s, next_states, members=None) -> np.ndarray:
        """Log-densities of ``next_states`` given one state ``s``; shape (n_members, n)."""
        mu, ls = self.predict(np.asarray(s, dtype=float)[None, :], members)
        y = self.normalize(np.atleast_2d(next_states))
        return gaussian_log_density(mu[:, 0, None, :], ls[:, 0, None, :], y[None, :, :])

    def to_manifest(self) -> dict:
        return {
            "n_members": len(self.members),
            "elites": [int(i) for i in self.elites],
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "holdout_nll": [float(v) for v in self.holdout_nll],
        }


def gaussian_log_density(mean, log_std, x):
    """Diagonal Gaussian log-pdf summed over the last axis (broadcasting)."""
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * x.shape[-1] * LOG_2PI


def log_density(ensemble: DynamicsEnsemble, member: int, s, s_next) -> float:
    """Exact log p_member(s_next | s) in normalised state space."""
    return float(ensemble.log_density(s, np.asarray(s_next, dtype=float)[None, :], members=[member])[0, 0])


def reachability_margin(ensemble: DynamicsEnsemble, s, s_observed, candidates) -> np.ndarray:
    """``min_i log p_i(cand|s) - log mean_i p_i(s_obs|s)`` over elites, per candidate."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    ll = ensemble.log_density(s, np.vstack([np.asarray(s_observed, dtype=float)[None, :], cands]))
    return margin_from_log_densities(ll[:, 1:], ll[:, 0])


def margin_from_log_densities(cand_ll: np.ndarray, observed_ll: np.ndarray) -> np.ndarray:
    """cand_ll: (n_elites, n); observed_ll: (n_elites,)."""
    top = observed_ll.max()
    log_mean_observed = top + np.log(np.mean(np.exp(observed_ll - top)))
    return cand_ll.min(axis=0) - log_mean_observed


def reachability_check(ensemble: DynamicsEnsemble, s, s_observed, s_candidate) -> bool:
    return bool(reachability_margin(ensemble, s, s_observed, s_candidate)[0] > 0)


# -- training ----------------------------------------------------------------


def nll_loss_and_grads(mean, log_std, y):
    """Per-batch mean of (mu - y)^T Sigma^-1 (mu - y) + log|Sigma| with gradients."""
    inv_var = np.exp(-2.0 * log_std)
    diff = mean - y
    sq = diff * diff * inv_var
    n = len(y)
    loss = float(np.mean(np.sum(sq + 2.0 * log_std, axis=1)))
    g_mean = 2.0 * diff * inv_var / n
    g_log_std = (2.0 - 2.0 * sq) / n
    return loss, g_mean, g_log_std


def _holdout_nll(net, x, y):
    mu, ls = nn.forward(net, x)
    return float(-np.mean(gaussian_log_density(mu, ls, y)))


def train_member(net, x_train, y_train, x_val, y_val, cfg: DynamicsConfig, rng) -> tuple[nn.Network, float]:
    opt = nn.Adam(learning_rate=cfg.learning_rate)
    best = net.copy()
    best_nll = _holdout_nll(net, x_val, y_val) if len(x_val) else np.inf
    stale = 0
    steps = 0
    n = len(x_train)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = nn.forward_cached(net, x_train[idx])
            loss, g_mean, g_ls = nll_loss_and_grads(*out, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingFault(f"non-finite dynamics loss at epoch {epoch}, step {steps}")
            grads, _ = nn.backward_cached(net, cache, (g_mean, g_ls))
            opt.step(net, grads)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        if len(x_val):
            val = _holdout_nll(net, x_val, y_val)
            if not np.isfinite(val):
                raise TrainingFault(f"non-finite dynamics validation NLL at epoch {epoch}")
            if val < best_nll:
                best_nll, best, stale = val, net.copy(), 0
            else:
                stale += 1
        else:
            best = net.copy()
        if stale >= cfg.patience or (cfg.max_steps is not None and steps >= cfg.max_steps):
            break
    best.meta.update({"steps": steps})
    return best, best_nll


def train_dynamics(dataset: Dataset, config: DynamicsConfig | None = None) -> DynamicsEnsemble:
    cfg = config or DynamicsConfig()
    if dataset.n_transitions == 0:
        raise ConfigurationError("cannot train dynamics on an empty dataset")
    if cfg.n_elites > cfg.ensemble_size:
        raise ConfigurationError("more elites than ensemble members")
    mean, std = normalization_stats(dataset)
    x = (dataset.states - mean) / std
    y = (dataset.next_states - mean) / std
    split_rng = np.random.default_rng([cfg.seed, 0])
    perm = split_rng.permutation(len(x))
    n_val = int(round(cfg.holdout_fraction * len(x)))
    if n_val >= len(x):
        n_val = 0
    val, train = perm[:n_val], perm[n_val:]
    d = dataset.d_s
    members, scores = [], []
    for i in range(cfg.ensemble_size):
        rng = np.random.default_rng([cfg.seed, 1, i])
        net = nn.init_network(nn.mlp_sizes(d, cfg.hidden, 2 * d), rng, head="gaussian",
                              log_std_bounds=cfg.log_std_bounds)
        net, score = train_member(net, x[train], y[train], x[val], y[val], cfg, rng)
        net.meta["seed"] = cfg.seed
        log.debug("dynamics member %d: holdout NLL %.4f", i, score)
        members.append(net)
        scores.append(score)
    elites = sorted(np.argsort(scores, kind="stable")[: cfg.n_elites].tolist())
    return DynamicsEnsemble(members, elites, mean, std, scores)


# -- checkpoints ---------------------------------------------------------------


def save_ensemble(ensemble: DynamicsEnsemble, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, net in enumerate(ensemble.members):
        nn.save_network(net, directory / f"member_{i}.json")
    nn.save_json(ensemble.to_manifest(), directory / "manifest.json")


def load_ensemble(directory) -> DynamicsEnsemble:
    directory = Path(directory)
    manifest = nn.load_json(directory / "manifest.json")
    members = [nn.load_network(directory / f"member_{i}.json") for i in range(manifest["n_members"])]
    return DynamicsEnsemble(
        members,
        list(manifest["elites"]),
        np.array(manifest["state_mean"]),
        np.array(manifest["state_std"]),
        list(manifest.get("holdout_nll", [])),
    )
