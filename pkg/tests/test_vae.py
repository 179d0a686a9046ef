import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvood import numerics as nx
from bvood.factorgen import Dataset, PartitionSpec, generate_partition
from bvood.vae import (
    VaeConfig, VaeModel, decode, elbo_loss, encode, encode_batch, kl_divergence,
    reconstruction_mse, reparameterize, train,
)
from oracles import LD, central_diff, rel_err, vae_loss

TINY = VaeConfig(n_latent=2, hidden=(4,), epochs=3, batch_size=8, seed=1)


def zero_encoder(config=TINY, seed=0):
    model = VaeModel.initialize(config, np.random.default_rng(seed))
    model.params["enc_out.W"][:] = 0.0
    model.params["enc_out.b"][:] = 0.0
    return model


@pytest.fixture(scope="module")
def small_data():
    p = generate_partition(PartitionSpec("time-of-day", "day", n_train=64, n_val=16,
                                         n_test1=0, n_test2=0, seed=3))
    return p["train"]


def test_zero_encoder_gives_standard_posterior():
    stats = encode(zero_encoder(), np.full((32, 32), 0.8))
    assert np.array_equal(stats.mu, np.zeros(2))
    assert np.array_equal(stats.logvar, np.zeros(2))


def test_kl_examples():
    assert float(kl_divergence(np.array(1.0), np.array(0.0)).value) == 0.5
    assert float(kl_divergence(np.array(0.0), np.array(0.0)).value) == 0.0


@given(st.floats(-5, 5), st.floats(-10, 10))
def test_kl_nonnegative(mu, lv):
    assert float(kl_divergence(np.array(mu), np.array(lv)).value) >= 0.0


def test_reparameterize_examples():
    z = reparameterize(np.array([0.0, 1.0]), np.array([0.0, np.log(4.0)]), np.array([1.0, -0.5]))
    np.testing.assert_allclose(z.value, [1.0, 0.0], atol=1e-15)
    z = reparameterize(np.array([2.0]), np.array([3.0]), np.array([0.0]))
    assert z.value[0] == 2.0


def test_reparameterize_gradient():
    mu = nx.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    lv = nx.Tensor(np.array([0.5, -1.0]), requires_grad=True)
    eps = np.array([0.7, -1.3])
    g = nx.backward(reparameterize(mu, lv, eps).sum(), [mu, lv])
    np.testing.assert_allclose(g[mu], [1.0, 1.0])
    np.testing.assert_allclose(g[lv], 0.5 * np.exp(lv.value / 2) * eps, rtol=1e-14)


def test_decoder_output_in_unit_interval():
    model = VaeModel.initialize(VaeConfig(n_latent=3, hidden=(16,)), np.random.default_rng(0))
    out = decode(model, np.random.default_rng(1).normal(0, 5, size=(20, 3)))
    assert out.shape == (20, 1024)
    assert np.all((out > 0) & (out < 1))


def test_loss_reduces_to_sse_at_beta_zero():
    model = zero_encoder()
    x = np.random.default_rng(2).uniform(size=(3, 1024))
    noise = np.zeros((3, 2))
    loss, parts = elbo_loss(model, x, noise, beta=0.0)
    xhat = decode(model, np.zeros((3, 2)))
    assert parts["kl"] == 0.0
    np.testing.assert_allclose(float(loss.value), np.sum((xhat - x) ** 2) / 3, rtol=1e-12)


def test_loss_zero_when_reconstruction_exact():
    model = zero_encoder()
    noise = np.zeros((2, 2))
    target = decode(model, noise)
    loss, parts = elbo_loss(model, target, noise)
    assert float(loss.value) == 0.0
    assert parts == {"reconstruction": 0.0, "kl": 0.0}


def test_loss_affine_in_beta():
    model = VaeModel.initialize(TINY, np.random.default_rng(4))
    x = np.random.default_rng(5).uniform(size=(4, 1024))
    noise = np.random.default_rng(6).standard_normal((4, 2))
    values = [float(elbo_loss(model, x, noise, beta=b)[0].value) for b in (0.0, 1.0, 2.0, 3.0)]
    steps = np.diff(values)
    assert values[0] >= 0
    assert np.all(steps >= 0)
    np.testing.assert_allclose(steps, steps[0], rtol=1e-10)


def test_elbo_gradient_matches_oracle():
    config = VaeConfig(n_latent=2, hidden=(3,), beta=1.4)
    rng = np.random.default_rng(7)
    model = VaeModel.initialize(config, rng)
    for v in model.params.values():
        v[...] = rng.uniform(-0.3, 0.3, size=v.shape)
    x = rng.uniform(size=(2, 1024))
    noise = rng.standard_normal((2, 2))
    tensors = model.parameter_tensors()
    loss, _ = elbo_loss(model, x, noise, tensors)
    grads = nx.backward(loss, tensors.values())

    ld = {k: v.astype(LD) for k, v in model.params.items()}
    names = ["enc_out.W", "enc_out.b", "enc0.b", "dec0.W", "dec0.b", "dec_out.b"]
    f = lambda: vae_loss(x.astype(LD), noise.astype(LD), ld, config.hidden, 2, LD(1.4))
    ref = central_diff(f, [ld[k] for k in names])
    np.testing.assert_allclose(float(loss.value), float(f()), rtol=1e-12)
    for k, r in zip(names, ref):
        assert rel_err(grads[tensors[k]], r).max() < 1e-6, k


def test_train_zero_epochs_returns_initial_model(small_data):
    config = VaeConfig(n_latent=2, hidden=(4,), epochs=0, seed=9)
    model, trace = train(config, small_data)
    fresh = VaeModel.initialize(config, np.random.default_rng(9))
    assert trace == []
    for k in fresh.params:
        assert np.array_equal(model.params[k], fresh.params[k])


def test_train_deterministic(small_data):
    m1, t1 = train(TINY, small_data)
    m2, t2 = train(TINY, small_data)
    assert t1 == t2
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_train_reduces_loss(small_data):
    _, trace = train(VaeConfig(n_latent=2, hidden=(16,), epochs=6, batch_size=8), small_data)
    assert trace[-1] < trace[0]


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train(TINY, Dataset.empty())


def test_reconstruction_mse_zero_for_exact():
    model = zero_encoder()
    target = decode(model, np.zeros((1, 2)))
    assert reconstruction_mse(model, target) == 0.0


def test_encode_batch_matches_single():
    model = VaeModel.initialize(TINY, np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(5, 32, 32))
    batch = encode_batch(model, x)
    for i in range(5):
        one = encode(model, x[i])
        np.testing.assert_allclose(one.mu, batch.mu[i], rtol=1e-14)


@pytest.mark.parametrize("kwargs", [{"n_latent": 0}, {"beta": -1.0}, {"hidden": ()},
                                    {"learning_rate": 0.0}, {"epochs": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        VaeConfig(**kwargs)


@pytest.mark.slow
def test_training_halves_loss_on_brightness_data():
    train_set = generate_partition(PartitionSpec("time-of-day", "day", n_train=200, n_val=0,
                                                 n_test1=0, n_test2=0, seed=8))["train"]
    _, trace = train(VaeConfig(n_latent=8, beta=1.5, epochs=50, seed=8), train_set)
    assert len(trace) == 50
    assert trace[-1] < 0.5 * trace[0]
