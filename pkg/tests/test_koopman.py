import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qiml import koopman as kp
from qiml.dynamics import FieldSeries
from qiml.numcore import RandomStream, finite_diff_gradient
from qiml.qcbm import Ansatz, GridMapping, KernelSpec, QPrior, empirical_target


def tiny_prior(n_grid=16, n_qubits=4, seed=0):
    a = Ansatz(n_qubits, 2, 2)
    th = np.random.default_rng(seed).uniform(-np.pi, np.pi, a.parameter_count)
    return QPrior(a, th, GridMapping((n_grid,), 1, n_qubits), bandwidths=(0.1, 0.25, 1.0))


def small_model(seed=0, n=16, l=4, hidden=(8, 6)):
    return kp.init_model((n,), l, RandomStream(seed), hidden, mean=0.1, scale=1.3)


def forward_oracle(model, u):
    p = model.params
    x = (u - model.mean) / model.scale
    h = np.tanh(x @ p["W1"] + p["b1"])
    h = np.tanh(h @ p["W2"] + p["b2"])
    return h @ p["W3"] + p["b3"]


def toy_series(seed, n_traj=3, n_frames=12, n=16):
    r = np.random.default_rng(seed)
    x = np.linspace(0, 2 * np.pi, n, endpoint=False)
    t = np.arange(n_frames)[:, None]
    vals = np.stack([np.sin(x[None] + 0.3 * t + r.uniform(0, 6)) + 0.05 * r.normal(size=(n_frames, n))
                     for _ in range(n_traj)])
    return FieldSeries(vals, 0.25)


# ---------------------------------------------------------------------------
# forward pieces


def test_identity_encoder_keeps_leading_components():
    m = kp.identity_model((8,), 3)
    u = np.arange(8.0)
    np.testing.assert_array_equal(kp.encode(m, u), [0, 1, 2])


def test_encoder_against_oracle(np_rng):
    m = small_model(3)
    u = np_rng.normal(size=16)
    np.testing.assert_allclose(kp.encode(m, u), forward_oracle(m, u), atol=1e-12)


def test_batch_consistency(np_rng):
    m = small_model(4)
    u = np_rng.normal(size=(2, 16))
    z = kp.encode(m, u)
    for i in range(2):
        np.testing.assert_allclose(z[i], kp.encode(m, u[i]), rtol=0, atol=1e-14)
    np.testing.assert_allclose(kp.decode(m, z)[1], kp.decode(m, z[1]), atol=1e-15)


def test_latent_step_identity_and_rotation():
    m = kp.identity_model((4,), 2)
    z = np.array([0.3, -0.7])
    np.testing.assert_array_equal(kp.latent_step(m, z), z)
    a = 0.4
    m.params["K"] = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    np.testing.assert_allclose(kp.latent_step(m, np.array([1.0, 0.0])), [np.cos(a), np.sin(a)], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_orthogonal_K(seed, l):
    r = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(r.normal(size=(l, l)))
    assert kp.unitarity_penalty(Q) <= 1e-12
    m = kp.identity_model((l,), l)
    m.params["K"] = Q
    z = r.normal(size=l)
    assert np.linalg.norm(kp.latent_step(m, z)) == pytest.approx(np.linalg.norm(z), rel=1e-9)


@pytest.mark.parametrize("K, expected", [(np.eye(5), 0.0), (np.zeros((3, 3)), 3.0), (2 * np.eye(2), 18.0)])
def test_penalty_values(K, expected):
    assert kp.unitarity_penalty(K) == pytest.approx(expected, abs=1e-15)


def test_penalty_rejects_non_square():
    with pytest.raises(ValueError):
        kp.unitarity_penalty(np.ones((2, 3)))


def test_unitarity_gradient(np_rng):
    K = np_rng.normal(size=(4, 4))
    fd = finite_diff_gradient(kp.unitarity_penalty, K)
    np.testing.assert_allclose(kp.unitarity_gradient(K), fd, rtol=1e-6, atol=1e-6)


# ---------------------------------------------------------------------------
# distributional terms


def test_zero_prediction_is_uniform():
    m = GridMapping((16,), 1, 5)
    q = kp.predicted_distribution(np.zeros((3, 16)), m)
    np.testing.assert_allclose(q[:16], 1 / 16)
    np.testing.assert_array_equal(q[16:], 0)


def test_predicted_matches_empirical_target(np_rng):
    u = np_rng.normal(size=(5, 8, 8)) + 3.0
    m = GridMapping((8, 8), 2, 4)
    np.testing.assert_allclose(kp.predicted_distribution(u, m), empirical_target(u, m), atol=1e-6)


def test_predicted_distribution_vjp(np_rng):
    m = GridMapping((8, 8), 2, 5)
    u = np_rng.normal(size=(3, 8, 8))
    w = np_rng.normal(size=32)
    g = kp.predicted_distribution_vjp(u, m, w)
    fd = finite_diff_gradient(lambda v: w @ kp.predicted_distribution(v, m), u)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_kl_examples():
    assert kp.kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0
    assert kp.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))
    floored = kp.kl_divergence([0.5, 0.5], [1.0, 0.0])
    assert np.isfinite(floored)
    assert floored == pytest.approx(0.5 * np.log(0.5) + 0.5 * np.log(0.5 / kp.KL_FLOOR))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    q, p = r.random(16), r.random(16) + 1e-3
    assert kp.kl_divergence(q / q.sum(), p / p.sum()) >= -1e-12


# ---------------------------------------------------------------------------
# loss and gradients


def test_perfect_predictor_has_zero_loss(np_rng):
    m = kp.identity_model((6,), 6)
    u = np_rng.normal(size=(4, 6))
    bd, tape = kp.total_loss(m, u, u, weights=kp.LossWeights(0, 0, 1))
    assert bd.total == 0
    assert all(not g.any() for g in kp.backward(m, tape).values())


def test_zero_K_adds_two(np_rng):
    m = kp.identity_model((4,), 2)
    m.params["K"] = np.zeros((2, 2))
    u, v = np_rng.normal(size=(3, 4)), np_rng.normal(size=(3, 4))
    bd, _ = kp.total_loss(m, u, v, weights=kp.LossWeights(0, 0, 1))
    assert bd.total == pytest.approx(bd.recon + 2, abs=1e-14)


def test_bookkeeping_identity(np_rng):
    m = small_model(1)
    u = np_rng.normal(size=(5, 16))
    bd, _ = kp.total_loss(m, u, np.roll(u, 1, axis=1), tiny_prior(), kp.LossWeights(0.3, 2.0, 0.7))
    assert bd.kl > 0 and bd.mmd > 0
    assert bd.total == pytest.approx(bd.recomputed_total(), abs=1e-12)


def test_backward_needs_tape():
    with pytest.raises(ValueError):
        kp.backward(small_model(), None)


def test_grid_mismatch_is_rejected(np_rng):
    u = np_rng.normal(size=(2, 16))
    with pytest.raises(ValueError, match=r"\(8,\).*\(16,\)"):
        kp.total_loss(small_model(), u, u, tiny_prior(8, 3))


def backward_vs_fd(weights, n_probe=50, seed=0):
    m = small_model(seed)
    prior = tiny_prior()
    r = np.random.default_rng(seed)
    u = r.normal(size=(6, 16))
    v = np.roll(u, 1, axis=1) + 0.1 * r.normal(size=u.shape)
    kernel = KernelSpec(prior.bandwidths)
    _, tape = kp.total_loss(m, u, v, prior, weights, kernel)
    g = kp.flatten_grads(kp.backward(m, tape))
    theta = m.flat()
    coords = r.choice(theta.size, n_probe, replace=False)
    # every K entry is probed as well, so the unitarity path is always covered
    k0 = sum(m.params[k].size for k in kp.ENCODER)
    coords = np.unique(np.concatenate([coords, k0 + np.arange(16)]))

    def f(sub):
        t = theta.copy()
        t[coords] = sub
        return kp.total_loss(m.with_flat(t), u, v, prior, weights, kernel)[0].total

    fd = finite_diff_gradient(f, theta[coords], h=1e-6)
    rel = np.abs(g[coords] - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(g[coords])), 1e-8)
    return float(rel.max())


@pytest.mark.parametrize("weights", [kp.LossWeights(0, 0, 1), kp.LossWeights(0.5, 0, 1),
                                     kp.LossWeights(0, 2.0, 1), kp.LossWeights(0.1, 1.0, 1.0)])
def test_backward_against_finite_differences(weights):
    assert backward_vs_fd(weights) <= 1e-4


# ---------------------------------------------------------------------------
# training


def cfg(**kw):
    base = dict(latent_dim=4, hidden=(12, 8), epochs=3, batch_size=8, learning_rate=1e-3)
    base.update(kw)
    return kp.SurrogateConfig(**base)


def test_zero_epochs_returns_init():
    train = toy_series(0)
    model, log = kp.train_surrogate(train, toy_series(1, 1), None, cfg(epochs=0, lambda_kl=0, lambda_mmd=0),
                                    RandomStream(5))
    fresh = kp.init_model((16,), 4, RandomStream(5).spawn(0), (12, 8), mean=train.values.mean(),
                          scale=train.values.std())
    np.testing.assert_array_equal(model.flat(), fresh.flat())
    assert log.rows == []


def test_training_is_deterministic():
    args = (toy_series(0), toy_series(1, 1), tiny_prior(), cfg())
    m1, l1 = kp.train_surrogate(*args, RandomStream(9))
    m2, l2 = kp.train_surrogate(*args, RandomStream(9))
    assert l1.rows == l2.rows
    assert kp.encode_model(m1) == kp.encode_model(m2)


def test_baseline_ignores_prior_contents():
    c = cfg(lambda_kl=0.0, lambda_mmd=0.0)
    m1, l1 = kp.train_surrogate(toy_series(0), toy_series(1, 1), tiny_prior(seed=1), c, RandomStream(2))
    m2, l2 = kp.train_surrogate(toy_series(0), toy_series(1, 1), tiny_prior(seed=2), c, RandomStream(2))
    assert l1.rows == l2.rows
    assert kp.encode_model(m1) == kp.encode_model(m2)
    assert all(r["kl"] == 0 and r["mmd"] == 0 for r in l1.rows)


def test_training_reduces_loss():
    _, log = kp.train_surrogate(toy_series(0), toy_series(1, 1), tiny_prior(), cfg(epochs=15, learning_rate=3e-3),
                                RandomStream(3))
    assert log.rows[-1]["recon"] < log.rows[0]["recon"]
    for r in log.rows:
        assert r["total"] == pytest.approx(r["recon"] + r["unitary"] + 0.1 * r["kl"] + r["mmd"], rel=1e-9)


def test_missing_prior_rejected():
    with pytest.raises(ValueError, match="prior"):
        kp.train_surrogate(toy_series(0), None, None, cfg(), RandomStream(0))


def test_log_csv(tmp_path):
    _, log = kp.train_surrogate(toy_series(0), toy_series(1, 1), tiny_prior(), cfg(epochs=2), RandomStream(0))
    path = tmp_path / "log.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,recon,unitary,kl,mmd,total,val_recon" and len(lines) == 3


# ---------------------------------------------------------------------------
# rollout and checkpoints


def test_rollout_single_step(np_rng):
    m = small_model(2)
    u0 = np_rng.normal(size=16)
    r = kp.rollout(m, u0, 1)
    np.testing.assert_array_equal(r.frames[0], kp.predict_next(m, u0))


def test_identity_rollout_repeats(np_rng):
    m = kp.identity_model((8,), 8)
    u0 = np_rng.normal(size=8)
    r = kp.rollout(m, u0, 5)
    np.testing.assert_allclose(r.frames, np.tile(u0, (5, 1)), atol=1e-15)
    assert r.latent_drift() == pytest.approx(0, abs=1e-15)


def test_latent_only_rollout_norm_preserved(np_rng):
    m = small_model(2)
    Q, _ = np.linalg.qr(np_rng.normal(size=(4, 4)))
    m.params["K"] = Q
    r = kp.rollout(m, np_rng.normal(size=16), 50, latent_only=True)
    assert r.latent_drift() <= 1e-9


def test_divergent_rollout_truncates():
    m = kp.identity_model((4,), 4)
    m.params["K"] = 1e80 * np.eye(4)
    r = kp.rollout(m, np.ones(4), 20, latent_only=True)
    assert r.truncated and r.frames.shape[0] == r.first_bad_frame < 20


def test_horizon_must_be_positive():
    with pytest.raises(ValueError):
        kp.rollout(small_model(), np.zeros(16), 0)


def test_model_round_trip(tmp_path):
    m = small_model(7)
    path = tmp_path / "m.qims"
    kp.save_model(m, path)
    back = kp.load_model(path)
    assert kp.encode_model(back) == kp.encode_model(m)
    assert back.grid_shape == (16,) and back.mean == m.mean and back.hidden == (8, 6)


def test_model_corruption():
    data = bytearray(kp.encode_model(small_model()))
    with pytest.raises(kp.ModelFormatError, match="expected"):
        kp.decode_model(bytes(data[:-3]))
    data[60] ^= 1
    with pytest.raises(kp.ModelFormatError, match="CRC"):
        kp.decode_model(bytes(data))
