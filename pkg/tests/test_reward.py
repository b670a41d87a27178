import numpy as np
import pytest

from stitchkit import nn
from stitchkit.data import Dataset, Trajectory
from stitchkit.reward import (LATENT_DIM, RewardGAN, WGANConfig, _critic_step, _generator_step, clip_parameters,
                              predict_reward, train_wgan)


def test_config_defaults():
    cfg = WGANConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.betas, cfg.l2) == (1e-4, 256, (0.5, 0.999), 1e-4)
    assert (cfg.clip, cfg.n_critic, cfg.hidden) == (0.01, 5, (512, 512))
    assert LATENT_DIM == 2


def _zero_model():
    gen = nn.zero_network([LATENT_DIM + 5, 4, 1])
    critic = nn.zero_network([6, 4, 1])
    return RewardGAN(gen, critic, 0.01, np.zeros(2), np.ones(2), 0.0, 1.0)


def test_zero_generator_predicts_zero():
    assert predict_reward(_zero_model(), np.ones(2), np.ones(1), np.ones(2), np.random.default_rng(0)) == 0.0


def test_prediction_reproducible_under_seed():
    rng = np.random.default_rng(0)
    model = _zero_model()
    model.generator = nn.init_network([LATENT_DIM + 5, 8, 1], rng)
    args = (np.array([0.1, 0.2]), np.array([0.5]), np.array([0.3, 0.0]))
    a = predict_reward(model, *args, np.random.default_rng(7))
    b = predict_reward(model, *args, np.random.default_rng(7))
    assert a == b
    assert a != predict_reward(model, *args, np.random.default_rng(8))


def test_clip_bounds_every_parameter():
    rng = np.random.default_rng(1)
    net = nn.init_network([3, 5, 1], rng)
    for p in net.params():
        p *= 100
    clip_parameters(net, 0.01)
    assert max(np.abs(p).max() for p in net.params()) <= 0.01


def test_critic_step_descends_data_minus_generated():
    """The critic minimises E_data[D] - E_gen[D] and is clipped afterwards."""
    rng = np.random.default_rng(2)
    critic = nn.init_network([4, 8, 1], rng)
    clip_parameters(critic, 0.01)
    cond = rng.normal(size=(64, 3))
    real, fake = rng.normal(1.0, 0.1, 64), rng.normal(-1.0, 0.1, 64)
    opt = nn.Adam(1e-3, 0.5, 0.999)
    first = _critic_step(critic, cond, real, fake, opt, 0.01)
    for _ in range(50):
        last = _critic_step(critic, cond, real, fake, opt, 0.01)
        assert max(np.abs(p).max() for p in critic.params()) <= 0.01
    assert last < first


def test_generator_step_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    gen = nn.init_network([LATENT_DIM + 3, 6, 1], rng)
    critic = nn.init_network([4, 6, 1], rng)
    cond, z = rng.normal(size=(8, 3)), rng.normal(size=(8, LATENT_DIM))

    def loss(g):
        r = nn.forward(g, np.hstack([z, cond]))
        return float(nn.forward(critic, np.hstack([cond, r])).mean())

    probe = gen.copy()
    opt = nn.Adam(learning_rate=1e-12)  # tiny lr: capture the gradient through Adam's first step sign
    before = [p.copy() for p in probe.params()]
    _generator_step(probe, critic, cond, z, opt)
    # the first Adam step moves each parameter by -lr * sign(grad)
    h = 1e-6
    for p_before, p_after, p in zip(before, probe.params(), gen.params()):
        flat = p.reshape(-1)
        moved = (p_after - p_before).reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss(gen)
            flat[j] = old - h
            down = loss(gen)
            flat[j] = old
            num = (up - down) / (2 * h)
            if abs(num) > 1e-6:
                assert np.sign(moved[j]) == -np.sign(num)


def _reward_dataset(rng, n):
    goal = np.array([1.0, 1.0])
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 1))
    s2 = s + 0.1 * rng.normal(size=(n, 2))
    r = -np.linalg.norm(s2 - goal, axis=1)
    trajs = [Trajectory(i, s[i:i + 1], a[i:i + 1], r[i:i + 1], s2[i:i + 1], [True]) for i in range(n)]
    return Dataset(trajs, 2, 1)


def test_training_keeps_critic_clipped_and_logs():
    rng = np.random.default_rng(4)
    ds = _reward_dataset(rng, 200)
    model = train_wgan(ds, WGANConfig(hidden=(16, 16), generator_steps=40, eval_every=10, seed=0))
    assert max(np.abs(p).max() for p in model.critic.params()) <= 0.01
    assert [h["step"] for h in model.history] == [10, 20, 30, 40]
    assert all(np.isfinite(h["holdout_mae"]) for h in model.history)


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(5)
    ds = _reward_dataset(rng, 60)
    cfg = WGANConfig(hidden=(8,), generator_steps=5, eval_every=5, seed=2)
    a, b = train_wgan(ds, cfg), train_wgan(ds, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.generator.params(), b.generator.params()))


def test_round_trip_dict():
    rng = np.random.default_rng(6)
    ds = _reward_dataset(rng, 30)
    model = train_wgan(ds, WGANConfig(hidden=(8,), generator_steps=3, eval_every=3, seed=1))
    back = RewardGAN.from_dict(model.to_dict())
    args = (ds.states[0], ds.actions[0], ds.next_states[0])
    assert predict_reward(model, *args, np.random.default_rng(0)) == predict_reward(back, *args,
                                                                                     np.random.default_rng(0))


def test_too_small_dataset_rejected():
    ds = _reward_dataset(np.random.default_rng(0), 1)
    with pytest.raises(ValueError):
        train_wgan(ds, WGANConfig(hidden=(4,), generator_steps=1))
