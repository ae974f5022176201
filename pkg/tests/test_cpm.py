import numpy as np
import pytest

from touchsteer import tensor as T
from touchsteer.cpm import (
    CpmConfig,
    CpmModel,
    CpmTrainConfig,
    contrastive_loss,
    corrupt_actions,
    infonce_loss,
    load_cpm,
    retrieval_accuracy,
    save_cpm,
    train_cpm,
    _distinct_step_batch,
)
from touchsteer.schedulers import DdpmSchedule, GeometricNoiseSampler
from touchsteer.tensor import Tensor

H, D, DV, DT = 8, 12, 5, 10


def model(seed=0, **cfg):
    return CpmModel(DV, DT, H, D, np.random.default_rng(seed),
                    config=CpmConfig(**cfg) if cfg else None)


def toy_dataset(n=200, seed=0):
    rng = np.random.default_rng(seed)
    steps = np.tile(np.arange(n // 4), 4)[:n]
    return {
        "visual": rng.normal(size=(n, DV)),
        "tactile": rng.normal(size=(n, DT)),
        "chunks": rng.normal(size=(n, H, D)),
        "step": steps,
    }


def test_embeddings_unit_norm():
    m = model()
    rng = np.random.default_rng(1)
    with T.no_grad():
        obs = m.encode_observation_batch(rng.normal(size=(6, DV)), rng.normal(size=(6, DT))).data
        act = m.encode_action_batch(rng.normal(size=(6, H, D))).data
    np.testing.assert_allclose(np.linalg.norm(obs, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(act, axis=1), 1.0, atol=1e-12)


def test_modalities_are_not_interchangeable():
    m = CpmModel(DV, DV, H, D, np.random.default_rng(2))  # equal dims on purpose
    rng = np.random.default_rng(3)
    v, t = rng.normal(size=(1, DV)), rng.normal(size=(1, DV))
    a = m.encode_observation(v, t)
    b = m.encode_observation(t, v)
    assert not np.allclose(a, b), "swapping modalities must change the embedding"


def test_zero_weight_encoders_still_unit_norm():
    m = model(seed=4)
    m.zero_weights()
    with T.no_grad():
        obs = m.encode_observation_batch(np.zeros((2, DV)), np.zeros((2, DT))).data
        act = m.encode_action_batch(np.zeros((2, H, D))).data
    assert np.isfinite(obs).all() and np.isfinite(act).all()
    np.testing.assert_allclose(np.linalg.norm(obs, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(act, axis=1), 1.0, atol=1e-12)


def test_dim_mismatch_rejected():
    m = model()
    with pytest.raises(ValueError, match="visual"):
        m.encode_observation(np.zeros(DV + 1), np.zeros(DT))
    with pytest.raises(ValueError, match="chunk"):
        m.encode_action(np.zeros((H + 1, D)))


def test_score_is_cosine_of_unit_embeddings():
    m = model(seed=5)
    rng = np.random.default_rng(6)
    v, t, a = rng.normal(size=DV), rng.normal(size=DT), rng.normal(size=(H, D))
    s = m.feasibility_score(v, t, a)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9
    obs = m.encode_observation(v, t)
    act = m.encode_action(a)
    assert s == pytest.approx(float(obs @ act), abs=1e-12)
    # identical embeddings score exactly 1; orthogonal score 0
    assert float(obs @ obs) == pytest.approx(1.0, abs=1e-12)
    e1, e2 = np.zeros(4), np.zeros(4)
    e1[0] = e2[1] = 1.0
    assert float(e1 @ e2) == 0.0


def test_score_invariant_to_prenorm_rescaling():
    m = model(seed=7)
    rng = np.random.default_rng(8)
    v, t, a = rng.normal(size=DV), rng.normal(size=DT), rng.normal(size=(H, D))
    base = m.feasibility_score(v, t, a)
    for name, p in m.named_params():
        if name.startswith("amlp.l1"):  # scale the final action projection
            p._assign(p.data * 7.5)
    assert m.feasibility_score(v, t, a) == pytest.approx(base, abs=1e-9)


def test_infonce_closed_forms():
    e1 = Tensor(np.array([[0.6, 0.8]]))
    assert infonce_loss(e1, e1, Tensor(1.0)).item() == 0.0  # M = 1 exactly
    e4 = Tensor(np.eye(4))
    val = infonce_loss(e4, e4, Tensor(1.0)).item()
    # hand evaluation: every row gives -log(e / (e + 3))
    by_hand = float(np.log(1.0 + 3.0 * np.exp(-1.0)))
    assert val == pytest.approx(by_hand, abs=1e-12)


def test_infonce_nonnegative_and_permutation_invariant():
    rng = np.random.default_rng(9)
    for _ in range(5):
        e = rng.normal(size=(6, 8))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        f = rng.normal(size=(6, 8))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        val = infonce_loss(Tensor(e), Tensor(f), Tensor(2.0)).item()
        assert val >= 0.0
        perm = rng.permutation(6)
        val_p = infonce_loss(Tensor(e[perm]), Tensor(f[perm]), Tensor(2.0)).item()
        assert val_p == pytest.approx(val, rel=1e-12)


def test_infonce_rejects_empty():
    with pytest.raises(ValueError):
        infonce_loss(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))), Tensor(1.0))


def test_distinct_step_batches():
    ds = toy_dataset()
    rng = np.random.default_rng(10)
    for _ in range(10):
        idx = _distinct_step_batch(ds["step"], rng, 32)
        chosen = ds["step"][idx]
        assert len(np.unique(chosen)) == len(chosen)


def test_corrupt_actions_levels():
    rng = np.random.default_rng(11)
    acts = rng.normal(size=(4, H, D))
    sched = DdpmSchedule.make(100)
    clean = corrupt_actions(acts, np.zeros(4, dtype=int), "flow", sched, 10, np.random.default_rng(0))
    assert np.array_equal(clean, acts), "flow level 0 must be exactly clean"
    noisy = corrupt_actions(acts, np.full(4, 3), "flow", sched, 10, np.random.default_rng(0))
    assert not np.allclose(noisy, acts)
    dn = corrupt_actions(acts, np.array([0, 1, 2, 3]), "diffusion", sched, 10, np.random.default_rng(0))
    assert dn.shape == acts.shape


def test_train_cpm_learns_and_keeps_tau_positive():
    ds = toy_dataset(n=160, seed=12)
    # make pairs learnable: actions carry the observation signature
    ds["chunks"][:, 0, :DV] = 5.0 * ds["visual"]
    m = model(seed=13)
    losses, metrics = train_cpm(
        m, ds, CpmTrainConfig(steps=150, lr=2e-3, batch_size=16, seed=3, metrics_every=50),
        family="flow", schedule=DdpmSchedule.make(100),
        geom=GeometricNoiseSampler(0.1, 3))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert all(np.isfinite(row["tau"]) and row["tau"] > 0 for row in metrics)
    assert metrics[-1]["retrieval"] > metrics[0]["retrieval"]


def test_train_cpm_rejects_empty():
    m = model()
    empty = {"visual": np.zeros((0, DV)), "tactile": np.zeros((0, DT)),
             "chunks": np.zeros((0, H, D)), "step": np.zeros(0, dtype=int)}
    with pytest.raises(ValueError, match="empty"):
        train_cpm(m, empty, CpmTrainConfig(steps=1), family="flow",
                  schedule=DdpmSchedule.make(10), geom=GeometricNoiseSampler(0.1, 3))


def test_score_gradient_matches_finite_differences():
    m = model(seed=14)
    rng = np.random.default_rng(15)
    v, t = rng.normal(size=DV), rng.normal(size=DT)
    a = rng.normal(size=(H, D))
    g = m.score_gradient(v, t, a)
    assert g.shape == (H, D)
    h = 1e-5
    worst = 0.0
    for _ in range(10):
        i, j = rng.integers(H), rng.integers(D)
        ap, am = a.copy(), a.copy()
        ap[i, j] += h
        am[i, j] -= h
        fd = (m.feasibility_score(v, t, ap) - m.feasibility_score(v, t, am)) / (2 * h)
        worst = max(worst, abs(g[i, j] - fd) / (abs(fd) + 1e-12))
    assert worst < 1e-5


def test_score_first_order_taylor():
    m = model(seed=16)
    rng = np.random.default_rng(17)
    v, t = rng.normal(size=DV), rng.normal(size=DT)
    a = rng.normal(size=(H, D))
    g = m.score_gradient(v, t, a)
    d = rng.normal(size=(H, D))
    eps = 1e-6
    lhs = m.feasibility_score(v, t, a + eps * d) - m.feasibility_score(v, t, a)
    assert lhs == pytest.approx(eps * float((g * d).sum()), rel=1e-3, abs=1e-12)


def test_modality_flags():
    with pytest.raises(ValueError):
        CpmConfig(use_vision=False, use_touch=False)
    rng = np.random.default_rng(18)
    v, t = rng.normal(size=(2, DV)), rng.normal(size=(2, DT))
    vision_only = model(seed=19, use_touch=False)
    with T.no_grad():
        a = vision_only.encode_observation_batch(v, t).data
        b = vision_only.encode_observation_batch(v, t * 100.0).data
    assert np.array_equal(a, b), "touch-blind model must ignore tactile input"


def test_checkpoint_round_trip(tmp_path):
    m = model(seed=20, use_vision=True, use_touch=True)
    rng = np.random.default_rng(21)
    v, t, a = rng.normal(size=DV), rng.normal(size=DT), rng.normal(size=(H, D))
    path = tmp_path / "cpm.tsck"
    save_cpm(m, path)
    back = load_cpm(path)
    assert back.feasibility_score(v, t, a) == m.feasibility_score(v, t, a)
    assert back.config.use_touch and back.config.use_vision


def test_retrieval_accuracy_perfect_on_signature_pairs():
    rng = np.random.default_rng(22)
    m = model(seed=23)
    n = 16
    acts = rng.normal(size=(n, H, D))
    sim = np.eye(n)
    # with an untrained model accuracy is near chance; with identical
    # obs/action indices forced through embeddings it is a consistency check
    acc = retrieval_accuracy(m, rng.normal(size=(n, DV)), rng.normal(size=(n, DT)), acts)
    assert 0.0 <= acc <= 1.0
