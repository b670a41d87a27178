import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stitchkit import nn
from stitchkit.data import Dataset, Trajectory
from stitchkit.dynamics import (DynamicsConfig, DynamicsEnsemble, gaussian_log_density, load_ensemble, log_density,
                                nll_loss_and_grads, reachability_check, reachability_margin, save_ensemble,
                                train_dynamics)
from stitchkit.errors import ConfigurationError


def fixed_member(mean_bias, log_std_bias, d=2):
    """Gaussian-head net whose output ignores the input: mean = mean_bias, log_std = log_std_bias."""
    net = nn.zero_network([d, 2 * d], head="gaussian")
    net.biases[0][:d] = mean_bias
    net.biases[0][d:] = log_std_bias
    return net


def identity_ensemble(members, d=2):
    return DynamicsEnsemble(members, list(range(len(members))), np.zeros(d), np.ones(d))


def random_ensemble(rng, n=5, d=2):
    members = [nn.init_network([d, 8, 2 * d], rng, head="gaussian") for _ in range(n)]
    return identity_ensemble(members, d)


def test_standard_normal_at_mean():
    ens = identity_ensemble([fixed_member([1.0, 2.0], [0.0, 0.0])])
    assert log_density(ens, 0, np.zeros(2), np.array([1.0, 2.0])) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_unit_offset():
    ens = identity_ensemble([fixed_member([0.0, 0.0], [0.0, 0.0])])
    assert log_density(ens, 0, np.zeros(2), np.array([1.0, 0.0])) == pytest.approx(-np.log(2 * np.pi) - 0.5)


def test_log_density_matches_direct_pdf():
    rng = np.random.default_rng(0)
    ens = random_ensemble(rng, n=3, d=3)
    for _ in range(20):
        s, y = rng.normal(size=3), rng.normal(size=3)
        mu, ls = nn.forward(ens.members[1], s)
        var = np.exp(2 * ls)
        pdf = np.prod(np.exp(-0.5 * (y - mu) ** 2 / var) / np.sqrt(2 * np.pi * var))
        assert log_density(ens, 1, s, y) == pytest.approx(np.log(pdf), abs=1e-10)


def test_log_density_uses_normalised_space():
    member = fixed_member([0.0, 0.0], [0.0, 0.0])
    ens = DynamicsEnsemble([member], [0], np.array([1.0, 1.0]), np.array([2.0, 2.0]))
    # raw y = [3, 1] normalises to [1, 0]
    assert log_density(ens, 0, np.zeros(2), np.array([3.0, 1.0])) == pytest.approx(-np.log(2 * np.pi) - 0.5)


def test_observed_state_never_reachable_from_itself():
    rng = np.random.default_rng(1)
    ens = random_ensemble(rng)
    for _ in range(50):
        s, y = rng.normal(size=2), rng.normal(size=2)
        assert not reachability_check(ens, s, y, y)


def test_identical_elites_strictly_likelier_candidate():
    m = fixed_member([0.0, 0.0], [0.0, 0.0])
    ens = identity_ensemble([m.copy() for _ in range(5)])
    assert reachability_check(ens, np.zeros(2), np.array([1.0, 1.0]), np.array([0.1, 0.0]))
    assert not reachability_check(ens, np.zeros(2), np.array([0.1, 0.0]), np.array([1.0, 1.0]))


def test_reachability_matches_density_domain_oracle():
    rng = np.random.default_rng(2)
    ens = random_ensemble(rng)
    agree = 0
    for _ in range(1000):
        s, obs, cand = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2) * 0.5
        pdf_cand, pdf_obs = [], []
        for i in ens.elites:
            mu, ls = nn.forward(ens.members[i], s)
            var = np.exp(2 * ls)
            pdf_cand.append(np.prod(np.exp(-0.5 * (cand - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)))
            pdf_obs.append(np.prod(np.exp(-0.5 * (obs - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)))
        oracle = min(pdf_cand) > np.mean(pdf_obs)
        agree += reachability_check(ens, s, obs, cand) == oracle
    assert agree == 1000


def test_margin_only_uses_elites():
    good = fixed_member([0.0, 0.0], [0.0, 0.0])
    bad = fixed_member([10.0, 10.0], [0.0, 0.0])
    ens = DynamicsEnsemble([good, bad, good.copy()], [0, 2], np.zeros(2), np.ones(2))
    m = reachability_margin(ens, np.zeros(2), np.array([1.0, 1.0]), np.array([[0.0, 0.0]]))
    assert m[0] == pytest.approx(1.0)  # log N(0) - log N([1,1]) = 0.5 * 2


def test_nll_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    mean, ls, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)) * 0.3, rng.normal(size=(4, 2))
    _, g_mean, g_ls = nll_loss_and_grads(mean, ls, y)
    h = 1e-6
    for arr, grad in ((mean, g_mean), (ls, g_ls)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = nll_loss_and_grads(mean, ls, y)[0]
            arr[idx] = old - h
            down = nll_loss_and_grads(mean, ls, y)[0]
            arr[idx] = old
            assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_config_defaults():
    cfg = DynamicsConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.ensemble_size, cfg.n_elites) == (3e-4, 256, 7, 5)
    assert (cfg.holdout_fraction, cfg.patience, cfg.max_epochs) == (0.1, 10, 200)


def test_elite_indices_validated():
    with pytest.raises(ConfigurationError):
        DynamicsEnsemble([fixed_member([0, 0], [0, 0])], [0, 3], np.zeros(2), np.ones(2))


def _noisy_identity_dataset(rng, n, noise):
    trajs = []
    for i in range(n):
        s = rng.uniform(-1, 1, size=(1, 1))
        s2 = s + noise * rng.normal(size=(1, 1))
        trajs.append(Trajectory(i, s, np.zeros((1, 1)), [0.0], s2, [True]))
    return Dataset(trajs, 1, 1)


@pytest.fixture(scope="module")
def noisy_model():
    rng = np.random.default_rng(4)
    ds = _noisy_identity_dataset(rng, 3000, 0.1)
    cfg = DynamicsConfig(hidden=(32, 32), ensemble_size=3, n_elites=2, max_epochs=60, seed=0)
    return ds, train_dynamics(ds, cfg)


def test_learned_std_matches_noise(noisy_model):
    ds, ens = noisy_model
    test = np.linspace(-0.8, 0.8, 50)[:, None]
    mu, ls = ens.predict(test)
    std_raw = np.exp(ls) * ens.state_std
    assert np.all((std_raw > 0.05) & (std_raw < 0.2))


def test_elites_have_lowest_holdout_nll(noisy_model):
    _, ens = noisy_model
    order = np.argsort(ens.holdout_nll, kind="stable")
    assert sorted(ens.elites) == sorted(order[:2].tolist())


def test_training_is_reproducible(noisy_model):
    ds, ens = noisy_model
    small = Dataset(ds.trajectories[:300], 1, 1)
    cfg = DynamicsConfig(hidden=(8,), ensemble_size=2, n_elites=1, max_epochs=2, seed=5)
    a, b = train_dynamics(small, cfg), train_dynamics(small, cfg)
    for m1, m2 in zip(a.members, b.members):
        assert all(np.array_equal(p, q) for p, q in zip(m1.params(), m2.params()))
    assert a.elites == b.elites


def test_ensemble_round_trip(tmp_path, noisy_model):
    _, ens = noisy_model
    save_ensemble(ens, tmp_path / "dyn")
    back = load_ensemble(tmp_path / "dyn")
    assert back.elites == ens.elites
    x = np.linspace(-1, 1, 7)[:, None]
    assert np.array_equal(back.log_density(x[0], x), ens.log_density(x[0], x))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_self_candidate_property(seed):
    rng = np.random.default_rng(seed)
    ens = random_ensemble(rng, n=5)
    s, y = rng.normal(size=2), rng.normal(size=2)
    ll = ens.log_density(s, y[None, :])[:, 0]
    if np.ptp(ll) > 0:
        assert not reachability_check(ens, s, y, y)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_log_and_density_domains_agree(seed):
    rng = np.random.default_rng(seed)
    mean, log_std, x = rng.normal(size=3), rng.uniform(-1, 1, size=3), rng.normal(size=3)
    direct = np.sum(np.log(np.exp(-0.5 * ((x - mean) / np.exp(log_std)) ** 2) / (np.sqrt(2 * np.pi) * np.exp(log_std))))
    assert gaussian_log_density(mean, log_std, x) == pytest.approx(direct, abs=1e-10)
