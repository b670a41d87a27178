"""Conditional VAE inverse-dynamics model: sample actions that connect s to s'."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from stitchkit import nn
from stitchkit.data import Dataset, input_stats
from stitchkit.errors import ConfigurationError, TrainingFault

log = logging.getLogger(__name__)

LARGE_DATASET = 900_000


@dataclass
class CVAEConfig:
    hidden: tuple | None = None  # None: 2 x (256 or 750) depending on dataset size
    learning_rate: float = 1e-4
    batch_size: int = 100
    steps: int = 400_000
    kl_weight: float = 0.5
    action_bounds: tuple | None = None
    seed: int = 0
    log_every: int = 1000


def default_hidden(n_transitions: int) -> tuple:
    width = 256 if n_transitions < LARGE_DATASET else 750
    return (width, width)


@dataclass
class InverseCVAE:
    encoder: nn.Network
    decoder: nn.Network
    action_bounds: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray
    kl_history: list = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def d_a(self) -> int:
        return self.decoder.out_dim

    def _cond(self, s, s_next):
        s = (np.atleast_2d(np.asarray(s, dtype=float)) - self.state_mean) / self.state_std
        s2 = (np.atleast_2d(np.asarray(s_next, dtype=float)) - self.state_mean) / self.state_std
        return np.hstack([s, s2])

    def decode(self, z, s, s_next) -> np.ndarray:
        return nn.forward(self.decoder, np.hstack([np.atleast_2d(z), self._cond(s, s_next)]))

    def generate(self, s, s_next, rng: np.random.Generator, latent_mode: str = "sample") -> np.ndarray:
        """Batched actions for rows of ``s`` and ``s_next``."""
        cond = self._cond(s, s_next)
        if latent_mode == "sample":
            z = rng.standard_normal((len(cond), self.latent_dim))
        elif latent_mode == "mean":
            z = np.zeros((len(cond), self.latent_dim))
        else:
            raise ConfigurationError(f"unknown latent mode {latent_mode!r}")
        return nn.forward(self.decoder, np.hstack([z, cond]))

    def generate_action(self, s, s_next, rng: np.random.Generator, latent_mode: str = "sample") -> np.ndarray:
        return self.generate(np.asarray(s)[None, :], np.asarray(s_next)[None, :], rng, latent_mode)[0]

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "action_bounds": self.action_bounds.tolist(),
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> InverseCVAE:
        return cls(
            nn.Network.from_dict(d["encoder"]),
            nn.Network.from_dict(d["decoder"]),
            np.array(d["action_bounds"]),
            np.array(d["state_mean"]),
            np.array(d["state_std"]),
        )


def generate_action(model: InverseCVAE, s, s_next, rng, latent_mode: str = "sample") -> np.ndarray:
    return model.generate_action(s, s_next, rng, latent_mode)


def action_bounds_for(dataset: Dataset, bounds=None) -> np.ndarray:
    if bounds is not None:
        b = np.broadcast_to(np.asarray(bounds, dtype=float), (dataset.d_a,)).copy()
    else:
        b = np.abs(dataset.actions).max(axis=0) if dataset.n_transitions else np.ones(dataset.d_a)
    return np.maximum(b, 1e-6)


def build_cvae(d_s: int, d_a: int, hidden, bounds, rng) -> tuple[nn.Network, nn.Network]:
    latent = 2 * d_a
    encoder = nn.init_network(nn.mlp_sizes(d_a + 2 * d_s, hidden, 2 * latent), rng, head="gaussian")
    decoder = nn.init_network(nn.mlp_sizes(latent + 2 * d_s, hidden, d_a), rng, head="tanh", scale=bounds)
    return encoder, decoder


def cvae_step(encoder, decoder, actions, cond, eps, kl_weight):
    """Squared-error reconstruction + kl_weight * KL(q || N(0, I)) and grads for both nets."""
    n = len(actions)
    (mu, log_std), enc_cache = nn.forward_cached(encoder, np.hstack([actions, cond]))
    std = np.exp(log_std)
    z = mu + std * eps
    recon, dec_cache = nn.forward_cached(decoder, np.hstack([z, cond]))
    diff = recon - actions
    recon_loss = float(np.mean(np.sum(diff * diff, axis=1)))
    kl = float(np.mean(0.5 * np.sum(mu * mu + std * std - 1.0 - 2.0 * log_std, axis=1)))
    dec_grads, g_in = nn.backward_cached(decoder, dec_cache, 2.0 * diff / n)
    g_z = g_in[:, : mu.shape[1]]
    g_mu = g_z + kl_weight * mu / n
    g_log_std = g_z * std * eps + kl_weight * (std * std - 1.0) / n
    enc_grads, _ = nn.backward_cached(encoder, enc_cache, (g_mu, g_log_std))
    return recon_loss, kl, enc_grads, dec_grads


def train_cvae(dataset: Dataset, config: CVAEConfig | None = None) -> InverseCVAE:
    cfg = config or CVAEConfig()
    if dataset.n_transitions == 0:
        raise ConfigurationError("cannot train the inverse model on an empty dataset")
    hidden = cfg.hidden or default_hidden(dataset.n_transitions)
    bounds = action_bounds_for(dataset, cfg.action_bounds)
    mean, std = input_stats(dataset)
    rng = np.random.default_rng([cfg.seed, 2])
    encoder, decoder = build_cvae(dataset.d_s, dataset.d_a, hidden, bounds, rng)
    model = InverseCVAE(encoder, decoder, bounds, mean, std)
    cond_all = model._cond(dataset.states, dataset.next_states)
    actions_all = dataset.actions
    enc_opt = nn.Adam(learning_rate=cfg.learning_rate)
    dec_opt = nn.Adam(learning_rate=cfg.learning_rate)
    n = len(actions_all)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        eps = rng.standard_normal((len(idx), model.latent_dim))
        recon, kl, enc_grads, dec_grads = cvae_step(encoder, decoder, actions_all[idx], cond_all[idx], eps, cfg.kl_weight)
        if not (np.isfinite(recon) and np.isfinite(kl)):
            raise TrainingFault(f"non-finite CVAE loss at step {step}")
        enc_opt.step(encoder, enc_grads)
        dec_opt.step(decoder, dec_grads)
        if step % cfg.log_every == 0:
            model.kl_history.append(kl)
            log.debug("cvae step %d: recon %.5f kl %.5f", step, recon, kl)
    encoder.meta.update(seed=cfg.seed, steps=cfg.steps)
    decoder.meta.update(seed=cfg.seed, steps=cfg.steps)
    return model
