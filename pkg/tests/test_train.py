import math

import numpy as np
import pytest

from ganinv import nn
from ganinv.errors import ConfigError, DimensionError
from ganinv.prior import Gaussian, Uniform
from ganinv.train import (LOG_CLAMP, AdamState, TrainConfig, _d_backward, adam_step,
                          discriminator_accuracy, discriminator_loss, generator_loss,
                          train_gan, tree_leaves)


def adam_by_hand(x, grads, lr, b1, b2, eps):
    """Scalar Adam written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
    return x


def test_adam_matches_hand_unrolled_oracle():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    x = np.array([1.5])
    state = AdamState.zeros_like(x)
    for g in grads:
        x, state = adam_step(x, np.array([g]), state, 0.01, 0.5, 0.999, 1e-8)
    assert x[0] == pytest.approx(adam_by_hand(1.5, grads, 0.01, 0.5, 0.999, 1e-8), rel=1e-14)
    assert state.t == len(grads)


def test_adam_first_step_is_sign_times_lr():
    x = np.zeros(3)
    new, _ = adam_step(x, np.array([5.0, -0.001, 1e3]), AdamState.zeros_like(x), 0.002)
    np.testing.assert_allclose(new, [-0.002, 0.002, -0.002], rtol=1e-5)


def test_adam_works_on_nested_parameters_and_does_not_mutate():
    params = ({"w": np.ones((2, 2))}, {})
    grads = ({"w": np.full((2, 2), 0.5)}, {})
    state = AdamState.zeros_like(params)
    new, state2 = adam_step(params, grads, state, 0.1)
    assert np.all(params[0]["w"] == 1.0)
    assert np.all(state.m[0]["w"] == 0.0)
    assert np.all(new[0]["w"] < 1.0)
    assert len(tree_leaves(state2.v)) == 1


def test_adam_rejects_mismatched_trees():
    with pytest.raises(DimensionError):
        adam_step({"a": np.ones(2)}, {"b": np.ones(2)}, AdamState.zeros_like({"a": np.ones(2)}), 0.1)


# ---------------------------------------------------------------- losses

def test_discriminator_loss_value_and_gradient():
    r, f = np.array([[0.9], [0.6]]), np.array([[0.2], [0.3]])
    loss, gr, gf = discriminator_loss(r, f)
    expect = -(np.log(0.9) + np.log(0.6)) / 2 - (np.log(0.8) + np.log(0.7)) / 2
    assert loss == pytest.approx(expect, rel=1e-14)
    np.testing.assert_allclose(gr, -1 / (2 * r))
    np.testing.assert_allclose(gf, 1 / (2 * (1 - f)))


def test_losses_are_finite_when_saturated():
    loss, gr, gf = discriminator_loss(np.array([0.0]), np.array([1.0]))
    assert loss == pytest.approx(-2 * math.log(LOG_CLAMP), rel=1e-6)
    assert np.isfinite(gr).all() and np.isfinite(gf).all()
    assert math.isfinite(generator_loss(np.array([0.0]))[0])


def test_generator_loss_is_non_saturating():
    loss, grad = generator_loss(np.array([0.25, 0.5]))
    assert loss == pytest.approx(-(math.log(0.25) + math.log(0.5)) / 2)
    np.testing.assert_allclose(grad, [-1 / (2 * 0.25), -1 / (2 * 0.5)])


def tiny_pair(seed=0):
    g = nn.build_network([nn.FullyConnected(2, 8), nn.BatchNorm(8), nn.Activation("relu"),
                          nn.FullyConnected(8, 16), nn.Reshape((1, 4, 4)),
                          nn.Activation("sigmoid")], (2,), seed)
    d = nn.build_network([nn.Conv(1, 2, 3, 1, 1), nn.BatchNorm(2),
                          nn.Activation("leaky_relu"), nn.Reshape((32,)),
                          nn.FullyConnected(32, 1), nn.Activation("sigmoid")], (1, 4, 4), seed + 1)
    return g, d


def test_logit_gradient_equals_clamped_gradient_away_from_saturation():
    _, d = tiny_pair()
    x = np.random.default_rng(0).uniform(0, 1, (5, 1, 4, 4))
    p, trace = nn.forward(d, x, nn.BnMode.BATCH_STATS)
    _, g_real, g_fake = discriminator_loss(p, p)
    fused = _d_backward(d, trace, g_real, 1.0, True)[0]
    plain = nn.backward_input(d, trace, g_real)
    np.testing.assert_allclose(fused, plain, rtol=1e-10, atol=1e-16)
    fused = _d_backward(d, trace, g_fake, 0.0, True)[0]
    np.testing.assert_allclose(fused, nn.backward_input(d, trace, g_fake), rtol=1e-10, atol=1e-16)


# ---------------------------------------------------------------- training loop

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)


def toy_images(n=64, seed=3):
    rng = np.random.default_rng(seed)
    imgs = np.zeros((n, 1, 4, 4))
    imgs[:, 0, 1:3, 1:3] = rng.uniform(0.6, 1.0, (n, 2, 2))
    return imgs


@pytest.mark.parametrize("prior", [Uniform(), Gaussian()])
def test_training_is_deterministic(prior):
    cfg = TrainConfig(iterations=6, batch_size=16, prior=prior, seed=5)
    runs = [train_gan(*tiny_pair(), toy_images(), cfg) for _ in range(2)]
    (g1, d1, h1), (g2, d2, h2) = runs
    assert h1 == h2
    for a, b in zip(tree_leaves(g1.params) + tree_leaves(d1.params),
                    tree_leaves(g2.params) + tree_leaves(d2.params)):
        assert np.array_equal(a, b)


def test_training_updates_running_stats_and_weights():
    g0, d0 = tiny_pair()
    g, d, history = train_gan(g0, d0, toy_images(),
                              TrainConfig(iterations=3, batch_size=16, seed=1))
    assert len(history) == 3 and all(math.isfinite(v) for _, a, b in history for v in (a, b))
    assert not np.array_equal(g.params[1]["running_mean"], g0.params[1]["running_mean"])
    assert not np.array_equal(d.params[1]["running_var"], d0.params[1]["running_var"])
    assert not np.array_equal(g.params[0]["weight"], g0.params[0]["weight"])


def test_generator_learns_toy_distribution():
    # real images: bright centre 2x2 block on a black border
    g, d = tiny_pair()
    g, d, _ = train_gan(g, d, toy_images(),
                        TrainConfig(iterations=100, batch_size=16, learning_rate=0.01, seed=2))
    x, _ = nn.forward(g, Uniform().sample(np.random.default_rng(1), (64, 2)),
                      nn.BnMode.BATCH_STATS)
    assert x[:, 0, 1:3, 1:3].mean() > 0.7
    assert x[:, 0, [0, 3], :].mean() < 0.1
    acc = discriminator_accuracy(g, d, toy_images(32, seed=9), Uniform(), seed=4)
    assert 0.0 <= acc <= 1.0


def test_training_rejects_bad_data():
    g, d = tiny_pair()
    with pytest.raises(DimensionError):
        train_gan(g, d, np.zeros((20, 1, 5, 5)), TrainConfig(batch_size=4))
    with pytest.raises(ConfigError):
        train_gan(g, d, np.full((20, 1, 4, 4), 2.0), TrainConfig(batch_size=4))
    with pytest.raises(ConfigError):
        train_gan(g, d, np.zeros((3, 1, 4, 4)), TrainConfig(batch_size=4))
