import numpy as np
import pytest

from touchsteer.mixtures import GaussianMixtureSpec, ddpm_optimal_epsilon, marginal_velocity_oracle
from touchsteer.policy import PolicyNet, TrainConfig, load_policy, save_policy, train_policy
from touchsteer.schedulers import DdpmSchedule


def gaussian_dataset(n=8000, mu=0.7, s=0.5, seed=0):
    rng = np.random.default_rng(seed)
    return {"chunks": rng.normal(mu, s, size=(n, 1, 1)), "cond": np.zeros((n, 0))}


def test_constructor_and_config_validation():
    with pytest.raises(ValueError, match="family"):
        PolicyNet("gan", 8, 3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


def test_zero_weight_net_outputs_zero():
    net = PolicyNet("flow", 4, 3, 2, np.random.default_rng(0), hidden=16)
    net.zero_weights()
    out = net.predict(np.ones((4, 3)), 0.5, np.ones(2))
    assert np.all(out == 0.0)


def test_predict_deterministic():
    net = PolicyNet("diffusion", 4, 3, 2, np.random.default_rng(1), hidden=16)
    x, cond = np.random.default_rng(2).normal(size=(4, 3)), np.ones(2)
    a = net.predict(x, 7, cond)
    b = net.predict(x, 7, cond)
    assert np.array_equal(a, b)


def test_family_time_type_mismatch():
    dnet = PolicyNet("diffusion", 2, 1, 0, np.random.default_rng(0), hidden=8)
    fnet = PolicyNet("flow", 2, 1, 0, np.random.default_rng(0), hidden=8)
    x = np.zeros((2, 1))
    with pytest.raises(TypeError, match="integer"):
        dnet.predict(x, 0.5, np.zeros(0))
    with pytest.raises(TypeError, match="fractional"):
        fnet.predict(x, 3, np.zeros(0))
    with pytest.raises(ValueError):
        fnet.predict(x, 1.5, np.zeros(0))


def test_memorizes_single_repeated_sample():
    # with one training point the noise is recoverable from the noisy input,
    # so the loss must collapse toward zero. A constant-beta schedule keeps
    # the inverse map's slope bounded (1/sqrt(1-abar) stays small), which is
    # what makes exact memorization reachable at this capacity.
    rng = np.random.default_rng(3)
    chunk = rng.normal(size=(1, 2, 3))
    ds = {"chunks": np.repeat(chunk, 64, axis=0), "cond": np.zeros((64, 0))}
    sched = DdpmSchedule.from_betas(np.full(20, 0.2))
    net = PolicyNet("diffusion", 2, 3, 0, rng, hidden=128)
    losses = train_policy(net, ds, TrainConfig(epochs=300, lr=3e-3, batch_size=64, seed=0),
                          schedule=sched)
    assert np.mean(losses[-10:]) < 0.03 * losses[0]


def test_training_is_seed_deterministic():
    ds = gaussian_dataset(n=512)
    cfg = TrainConfig(epochs=3, lr=1e-3, batch_size=128, seed=11)

    def run():
        net = PolicyNet("flow", 1, 1, 0, np.random.default_rng(5), hidden=32)
        return train_policy(net, ds, cfg), net

    (l1, n1), (l2, n2) = run(), run()
    assert l1 == l2
    for (_, p), (_, q) in zip(n1.named_params(), n2.named_params()):
        assert np.array_equal(p.data, q.data)


def test_nan_data_aborts_with_diagnostics():
    ds = {"chunks": np.full((32, 1, 1), np.nan), "cond": np.zeros((32, 0))}
    net = PolicyNet("flow", 1, 1, 0, np.random.default_rng(0), hidden=8)
    with pytest.raises(FloatingPointError, match="diverged"):
        train_policy(net, ds, TrainConfig(epochs=1, batch_size=32))


def test_trained_denoiser_matches_analytic_optimum():
    # 1D Gaussian data: the optimal epsilon head is known in closed form
    mu, s = 0.7, 0.5
    ds = gaussian_dataset(mu=mu, s=s)
    sched = DdpmSchedule.make(100)
    net = PolicyNet("diffusion", 1, 1, 0, np.random.default_rng(1), hidden=256)
    train_policy(net, ds, TrainConfig(epochs=150, lr=3e-3, batch_size=256, seed=0), schedule=sched)

    m_n = (mu - net.action_norm.mean[0]) / net.action_norm.std[0]
    s_n = s / net.action_norm.std[0]
    spec_n = GaussianMixtureSpec([m_n], [s_n], [1.0], [0])
    rng = np.random.default_rng(9)
    hold = (rng.normal(mu, s, size=3000) - net.action_norm.mean[0]) / net.action_norm.std[0]
    worst = 0.0
    for k in (5, 30, 60, 90):
        eps = rng.standard_normal(len(hold))
        ab = sched.alpha_bars[k]
        xk = np.sqrt(ab) * hold + np.sqrt(1 - ab) * eps
        pred = net.predict_batch(xk.reshape(-1, 1, 1), int(k), np.zeros((len(xk), 0))).ravel()
        rms = np.sqrt(np.mean((pred - ddpm_optimal_epsilon(spec_n, xk, k, sched)) ** 2))
        worst = max(worst, rms)
    assert worst < 0.05, f"epsilon RMS {worst}"


def test_trained_flow_matches_marginal_velocity_oracle():
    ds = gaussian_dataset()
    net = PolicyNet("flow", 1, 1, 0, np.random.default_rng(2), hidden=256)
    train_policy(net, ds, TrainConfig(epochs=150, lr=3e-3, batch_size=256, seed=0))
    m_n = (0.7 - net.action_norm.mean[0]) / net.action_norm.std[0]
    s_n = 0.5 / net.action_norm.std[0]
    spec_n = GaussianMixtureSpec([m_n], [s_n], [1.0], [0])
    worst = 0.0
    for t in (0.2, 0.5, 0.8):
        sd = np.sqrt((1 - t) ** 2 * s_n**2 + t**2)
        xs = np.linspace((1 - t) * m_n - 2.5 * sd, (1 - t) * m_n + 2.5 * sd, 41)
        pred = net.predict_batch(xs.reshape(-1, 1, 1), float(t), np.zeros((41, 0))).ravel()
        rms = np.sqrt(np.mean((pred - marginal_velocity_oracle(spec_n, xs, t)) ** 2))
        worst = max(worst, rms)
    assert worst < 0.1, f"velocity RMS {worst}"


def test_checkpoint_round_trip(tmp_path):
    ds = gaussian_dataset(n=256)
    net = PolicyNet("flow", 1, 1, 0, np.random.default_rng(7), hidden=32)
    train_policy(net, ds, TrainConfig(epochs=2, batch_size=64, seed=1))
    path = tmp_path / "net.tsck"
    save_policy(net, path)
    back = load_policy(path)
    x = np.random.default_rng(8).normal(size=(5, 1, 1))
    assert np.array_equal(
        net.predict_batch(x, 0.3, np.zeros((5, 0))),
        back.predict_batch(x, 0.3, np.zeros((5, 0))),
    )
    assert back.family == "flow" and back.action_param == net.action_param
