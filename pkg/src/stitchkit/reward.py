"""Conditional Wasserstein GAN that predicts rewards for synthetic transitions.

Both players minimise: the generator minimises E[D(s, a, s', G(z, s, a, s'))]
and the critic minimises E_data[D] - E_gen[D]. This is the usual WGAN game
with the critic's sign flipped, so the critic scores real transitions low.
Lipschitz continuity is enforced by clipping every critic parameter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from stitchkit import nn
from stitchkit.data import Dataset, input_stats
from stitchkit.errors import ConfigurationError, TrainingFault

log = logging.getLogger(__name__)

LATENT_DIM = 2


@dataclass
class WGANConfig:
    hidden: tuple = (512, 512)
    learning_rate: float = 1e-4
    batch_size: int = 256
    betas: tuple = (0.5, 0.999)
    l2: float = 1e-4
    clip: float = 0.01
    n_critic: int = 5
    generator_steps: int = 50_000
    holdout_fraction: float = 0.1
    eval_every: int = 500
    seed: int = 0


@dataclass
class RewardGAN:
    generator: nn.Network
    critic: nn.Network
    clip: float
    state_mean: np.ndarray
    state_std: np.ndarray
    reward_mean: float
    reward_std: float
    history: list = field(default_factory=list)

    def _cond(self, s, a, s_next):
        s = (np.atleast_2d(np.asarray(s, dtype=float)) - self.state_mean) / self.state_std
        s2 = (np.atleast_2d(np.asarray(s_next, dtype=float)) - self.state_mean) / self.state_std
        return np.hstack([s, np.atleast_2d(np.asarray(a, dtype=float)), s2])

    def predict(self, s, a, s_next, rng: np.random.Generator) -> np.ndarray:
        """Batched de-normalised reward samples."""
        cond = self._cond(s, a, s_next)
        z = rng.standard_normal((len(cond), LATENT_DIM))
        out = nn.forward(self.generator, np.hstack([z, cond]))[:, 0]
        return out * self.reward_std + self.reward_mean

    def predict_reward(self, s, a, s_next, rng: np.random.Generator) -> float:
        return float(self.predict(np.asarray(s)[None, :], np.asarray(a)[None, :], np.asarray(s_next)[None, :], rng)[0])

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "critic": self.critic.to_dict(),
            "clip": self.clip,
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RewardGAN:
        return cls(
            nn.Network.from_dict(d["generator"]),
            nn.Network.from_dict(d["critic"]),
            float(d["clip"]),
            np.array(d["state_mean"]),
            np.array(d["state_std"]),
            float(d["reward_mean"]),
            float(d["reward_std"]),
        )


def predict_reward(model: RewardGAN, s, a, s_next, rng) -> float:
    return model.predict_reward(s, a, s_next, rng)


def clip_parameters(net: nn.Network, c: float) -> None:
    for p in net.params():
        np.clip(p, -c, c, out=p)


def _critic_step(critic, cond, r_real, r_fake, opt, clip):
    n = len(cond)
    real_in = np.hstack([cond, r_real[:, None]])
    fake_in = np.hstack([cond, r_fake[:, None]])
    d_real, real_cache = nn.forward_cached(critic, real_in)
    d_fake, fake_cache = nn.forward_cached(critic, fake_in)
    loss = float(d_real.mean() - d_fake.mean())
    g_real, _ = nn.backward_cached(critic, real_cache, np.full((n, 1), 1.0 / n))
    g_fake, _ = nn.backward_cached(critic, fake_cache, np.full((n, 1), -1.0 / n))
    opt.step(critic, [a + b for a, b in zip(g_real, g_fake)])
    clip_parameters(critic, clip)
    return loss


def _generator_step(generator, critic, cond, z, opt):
    n = len(cond)
    r_fake, gen_cache = nn.forward_cached(generator, np.hstack([z, cond]))
    d_fake, critic_cache = nn.forward_cached(critic, np.hstack([cond, r_fake]))
    loss = float(d_fake.mean())
    _, g_in = nn.backward_cached(critic, critic_cache, np.full((n, 1), 1.0 / n))
    grads, _ = nn.backward_cached(generator, gen_cache, g_in[:, -1:])
    opt.step(generator, grads)
    return loss


def train_wgan(dataset: Dataset, config: WGANConfig | None = None) -> RewardGAN:
    cfg = config or WGANConfig()
    if dataset.n_transitions < 2:
        raise ConfigurationError("reward model needs at least 2 transitions")
    mean, std = input_stats(dataset)
    r = dataset.rewards
    r_mean, r_std = float(r.mean()), float(max(r.std(), 1e-6))
    rng = np.random.default_rng([cfg.seed, 3])
    d_cond = 2 * dataset.d_s + dataset.d_a
    generator = nn.init_network(nn.mlp_sizes(LATENT_DIM + d_cond, cfg.hidden, 1), rng)
    critic = nn.init_network(nn.mlp_sizes(d_cond + 1, cfg.hidden, 1), rng)
    clip_parameters(critic, cfg.clip)
    model = RewardGAN(generator, critic, cfg.clip, mean, std, r_mean, r_std)

    cond_all = model._cond(dataset.states, dataset.actions, dataset.next_states)
    r_all = (r - r_mean) / r_std
    perm = rng.permutation(len(r_all))
    n_val = int(round(cfg.holdout_fraction * len(r_all)))
    val, train = perm[:n_val], perm[n_val:]
    if len(train) == 0:
        train = perm
    b1, b2 = cfg.betas
    g_opt = nn.Adam(cfg.learning_rate, b1, b2, l2_coeff=cfg.l2)
    c_opt = nn.Adam(cfg.learning_rate, b1, b2, l2_coeff=cfg.l2)
    eval_rng = np.random.default_rng([cfg.seed, 4])
    best_mae, best_gen = np.inf, generator.copy()

    for step in range(cfg.generator_steps):
        for _ in range(cfg.n_critic):
            idx = train[rng.integers(0, len(train), size=cfg.batch_size)]
            cond = cond_all[idx]
            z = rng.standard_normal((len(idx), LATENT_DIM))
            r_fake = nn.forward(generator, np.hstack([z, cond]))[:, 0]
            c_loss = _critic_step(critic, cond, r_all[idx], r_fake, c_opt, cfg.clip)
        idx = train[rng.integers(0, len(train), size=cfg.batch_size)]
        z = rng.standard_normal((len(idx), LATENT_DIM))
        g_loss = _generator_step(generator, critic, cond_all[idx], z, g_opt)
        if not (np.isfinite(c_loss) and np.isfinite(g_loss)):
            raise TrainingFault(f"non-finite WGAN loss at generator step {step}")
        if len(val) and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.generator_steps):
            z = eval_rng.standard_normal((len(val), LATENT_DIM))
            pred = nn.forward(generator, np.hstack([z, cond_all[val]]))[:, 0]
            mae = float(np.mean(np.abs(pred - r_all[val]))) * r_std
            model.history.append({"step": step + 1, "critic_loss": c_loss, "generator_loss": g_loss, "holdout_mae": mae})
            log.debug("wgan step %d: critic %.5f gen %.5f mae %.5f", step + 1, c_loss, g_loss, mae)
            if mae < best_mae:
                best_mae, best_gen = mae, generator.copy()
    if len(val):
        generator.load_params(best_gen)
    generator.meta.update(seed=cfg.seed, steps=cfg.generator_steps)
    critic.meta.update(seed=cfg.seed, steps=cfg.generator_steps)
    return model
