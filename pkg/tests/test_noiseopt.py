"""Noise interpolation, losses, the persistent Adam update, and gradient
flow from the prediction loss back to the sampling noise."""

import numpy as np
import pytest

from noiseadapt import autodiff as ad
from noiseadapt.autodiff import Tensor
from noiseadapt.diffusion import SamplerConfig, sample
from noiseadapt.errors import (
    EtaNonZero,
    ModeMismatch,
    NonFiniteGradient,
    POutOfRange,
    ShapeMismatch,
)
from noiseadapt.noiseopt import (
    MODE_LATENT,
    MODE_PIXEL,
    MODE_PIXEL_FEATURE,
    NoiseState,
    OptimConfig,
    interpolate_noise,
    loss_feature,
    loss_latent,
    loss_pixel,
    optimize_noise_step,
    predict_and_adapt,
    predict_with_noise,
    total_loss,
)

RNG = np.random.default_rng(31)


# -- interpolation -----------------------------------------------------------

def test_interpolation_endpoints_bitwise():
    a = RNG.standard_normal((4, 4))
    b = RNG.standard_normal((4, 4))
    assert np.array_equal(interpolate_noise(1.0, a, b).data, a)
    assert np.array_equal(interpolate_noise(0.0, a, b).data, b)


def test_interpolation_variance_preserving():
    rng = np.random.default_rng(0)
    n = 100_000
    a = rng.standard_normal(n)
    b = rng.standard_normal(n)
    for p in (0.0, 0.25, 0.5, 0.75, 1.0):
        var = float(np.var(interpolate_noise(p, a, b).data))
        assert 0.98 <= var <= 1.02


def test_interpolation_matches_formula():
    a, b = RNG.standard_normal(5), RNG.standard_normal(5)
    p = 0.3
    expected = (p * a + (1 - p) * b) / np.sqrt(p * p + (1 - p) ** 2)
    np.testing.assert_allclose(interpolate_noise(p, a, b).data, expected,
                               atol=1e-12)


def test_interpolation_rejects_bad_p():
    a = np.zeros(3)
    for p in (-0.1, 1.5):
        with pytest.raises(POutOfRange):
            interpolate_noise(p, a, a)
    with pytest.raises(ShapeMismatch):
        interpolate_noise(0.5, np.zeros(3), np.zeros(4))


# -- losses ------------------------------------------------------------------

def test_pixel_loss_is_normalized_l1():
    x = RNG.random((1, 2, 8, 8))
    y = RNG.random((1, 2, 8, 8))
    assert loss_pixel(x, y).item() == pytest.approx(np.abs(x - y).mean(), abs=1e-12)


def test_latent_loss_is_normalized_l1():
    x = RNG.standard_normal((1, 4, 2, 2))
    y = RNG.standard_normal((1, 4, 2, 2))
    assert loss_latent(x, y).item() == pytest.approx(np.abs(x - y).mean(), abs=1e-12)


def test_feature_loss_is_normalized_l2(tiny_models, tiny_dims):
    fnet = tiny_models.feature_net
    x = RNG.random((1,) + tiny_dims.pixel_shape)
    y = RNG.random((1,) + tiny_dims.pixel_shape)
    with ad.no_grad():
        fx = fnet(Tensor(x)).data
        fy = fnet(Tensor(y)).data
    expected = float(np.mean((fx - fy) ** 2))
    assert loss_feature(x, y, fnet).item() == pytest.approx(expected, rel=1e-12)


def test_total_loss_combines_terms(tiny_models, tiny_dims):
    fnet = tiny_models.feature_net
    cfg = OptimConfig(lam=0.004)
    x = RNG.random((1,) + tiny_dims.pixel_shape)
    y = RNG.random((1,) + tiny_dims.pixel_shape)
    tot, bd = total_loss(x, y, cfg, feature_net=fnet, mode=MODE_PIXEL_FEATURE)
    assert bd.total == pytest.approx(bd.pixel + 0.004 * bd.feature, rel=1e-12)
    assert tot.item() == pytest.approx(bd.total, rel=1e-12)


def test_total_loss_zero_weight_matches_pixel_mode_bitwise(tiny_models, tiny_dims):
    x = RNG.random((1,) + tiny_dims.pixel_shape)
    y = RNG.random((1,) + tiny_dims.pixel_shape)
    a, _ = total_loss(x, y, OptimConfig(lam=0.0),
                      feature_net=tiny_models.feature_net,
                      mode=MODE_PIXEL_FEATURE)
    b, _ = total_loss(x, y, OptimConfig(), mode=MODE_PIXEL)
    assert a.item() == b.item()


def test_total_loss_mode_errors(tiny_dims):
    x = np.zeros((1,) + tiny_dims.pixel_shape)
    with pytest.raises(ModeMismatch):
        total_loss(x, x, OptimConfig(), mode="nope")
    with pytest.raises(ModeMismatch):
        total_loss(x, x, OptimConfig(), mode=MODE_PIXEL_FEATURE)  # no net


# -- noise update ------------------------------------------------------------

def oracle_adam(eps, m, v, grad, step, lr, b1, b2, e):
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mh = m / (1 - b1 ** step)
    vh = v / (1 - b2 ** step)
    return eps - lr * mh / (np.sqrt(vh) + e), m, v


def test_noise_update_matches_adam_oracle():
    cfg = OptimConfig(lr=0.02, clip_norm=None)
    state = NoiseState.init(np.random.default_rng(0), (2, 3))
    eps, m, v = state.eps.copy(), state.adam_m.copy(), state.adam_v.copy()
    for step in range(1, 6):
        grad = np.random.default_rng(step).standard_normal((2, 3))
        state = optimize_noise_step(state, grad, cfg)
        eps, m, v = oracle_adam(eps, m, v, grad, step, cfg.lr,
                                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        np.testing.assert_allclose(state.eps, eps, atol=1e-14)
    assert state.step_count == 5


def test_noise_update_clips_global_norm():
    cfg = OptimConfig(lr=0.01, clip_norm=10.0)
    state = NoiseState.init(np.random.default_rng(1), (100,))
    big = np.full(100, 5.0)  # norm 50 -> scaled to 10
    clipped = big * (10.0 / np.linalg.norm(big))
    after = optimize_noise_step(state, big, cfg)
    ref = optimize_noise_step(state, clipped, OptimConfig(lr=0.01, clip_norm=None))
    np.testing.assert_allclose(after.eps, ref.eps, atol=1e-15)


def test_noise_update_rejects_bad_gradients():
    state = NoiseState.init(np.random.default_rng(2), (4,))
    with pytest.raises(NonFiniteGradient):
        optimize_noise_step(state, np.array([1.0, np.nan, 0.0, 0.0]),
                            OptimConfig())
    with pytest.raises(ShapeMismatch):
        optimize_noise_step(state, np.zeros(5), OptimConfig())


def test_optim_config_validation():
    with pytest.raises(POutOfRange):
        OptimConfig(p=1.5).validate()
    with pytest.raises(POutOfRange):
        OptimConfig(lr=0.0).validate()
    OptimConfig().validate()


# -- prediction / adaptation -------------------------------------------------

def _setup(tiny_models, tiny_schedule, seed=0):
    rng = np.random.default_rng(seed)
    shape = (1,) + tiny_models.dims.latent_shape
    x_prev = rng.random((1,) + tiny_models.dims.pixel_shape)
    with ad.no_grad():
        z_cond = tiny_models.autoencoder.encode(Tensor(x_prev)).detach()
    state = NoiseState.init(rng, shape)
    sampler = SamplerConfig(num_steps=5, eta=0.0)
    return rng, z_cond, state, sampler


def test_predict_p1_uses_optimized_noise_bitwise(tiny_models, tiny_schedule):
    rng, z_cond, state, sampler = _setup(tiny_models, tiny_schedule)
    cfg = OptimConfig(p=1.0)
    graph = predict_with_noise(tiny_models, tiny_schedule, sampler, z_cond,
                               state, cfg, rng, MODE_PIXEL)
    with ad.no_grad():
        z_direct = sample(tiny_models.denoiser, tiny_schedule, sampler,
                          z_cond, Tensor(state.eps))
        x_direct = tiny_models.autoencoder.decode(z_direct).data[0]
    assert np.array_equal(graph.x_pred, x_direct)


def test_predict_rejects_stochastic_sampler(tiny_models, tiny_schedule):
    rng, z_cond, state, _ = _setup(tiny_models, tiny_schedule)
    with pytest.raises(EtaNonZero):
        predict_with_noise(tiny_models, tiny_schedule,
                           SamplerConfig(num_steps=5, eta=0.5), z_cond,
                           state, OptimConfig(), rng, MODE_PIXEL)


def test_gradient_through_sampler_matches_finite_differences(
        tiny_models, tiny_schedule):
    rng, z_cond, state, sampler = _setup(tiny_models, tiny_schedule, seed=3)
    cfg = OptimConfig(p=0.9, lam=0.002, clip_norm=None)
    x_obs = rng.random((1,) + tiny_models.dims.pixel_shape)[0]
    eps_fresh = rng.standard_normal(state.eps.shape)

    graph = predict_with_noise(tiny_models, tiny_schedule, sampler, z_cond,
                               state, cfg, rng, MODE_PIXEL_FEATURE,
                               eps_fresh=eps_fresh)
    tot, _ = total_loss(Tensor(x_obs[None]), graph.x_pred_tensor, cfg,
                        feature_net=tiny_models.feature_net,
                        mode=MODE_PIXEL_FEATURE)
    ad.backward(tot)
    grad = graph.eps_leaf.grad

    def loss_at(eps_val):
        with ad.no_grad():
            g2 = predict_with_noise(
                tiny_models, tiny_schedule, sampler, z_cond,
                NoiseState(eps=eps_val, adam_m=state.adam_m, adam_v=state.adam_v),
                cfg, rng, MODE_PIXEL_FEATURE, eps_fresh=eps_fresh)
            val, _ = total_loss(Tensor(x_obs[None]), Tensor(g2.x_pred[None]),
                                cfg, feature_net=tiny_models.feature_net,
                                mode=MODE_PIXEL_FEATURE)
            return val.item()

    d = np.random.default_rng(9).standard_normal(state.eps.shape)
    d /= np.linalg.norm(d)
    h = 1e-5
    fd = (loss_at(state.eps + h * d) - loss_at(state.eps - h * d)) / (2 * h)
    analytic = float(np.sum(grad * d))
    assert analytic == pytest.approx(fd, rel=1e-4)


def test_predict_and_adapt_updates_state(tiny_models, tiny_schedule):
    rng, z_cond, state, sampler = _setup(tiny_models, tiny_schedule, seed=4)
    x_obs = rng.random((1,) + tiny_models.dims.pixel_shape)[0]
    x_pred, new_state, breakdown = predict_and_adapt(
        tiny_models, tiny_schedule, sampler, z_cond, x_obs, state,
        OptimConfig(), rng, MODE_PIXEL)
    assert x_pred.shape == tiny_models.dims.pixel_shape
    assert new_state.step_count == 1
    assert not np.array_equal(new_state.eps, state.eps)
    assert breakdown.total == breakdown.pixel > 0


def test_latent_mode_adapts_in_latent_space(tiny_models, tiny_schedule):
    rng, z_cond, state, sampler = _setup(tiny_models, tiny_schedule, seed=5)
    x_obs = rng.random((1,) + tiny_models.dims.pixel_shape)[0]
    _, new_state, breakdown = predict_and_adapt(
        tiny_models, tiny_schedule, sampler, z_cond, x_obs, state,
        OptimConfig(), rng, MODE_LATENT)
    assert breakdown.latent > 0 and breakdown.pixel == 0
    assert new_state.step_count == 1


def test_adam_moments_persist_across_steps(tiny_models, tiny_schedule):
    rng, z_cond, state, sampler = _setup(tiny_models, tiny_schedule, seed=6)
    x_obs = rng.random((1,) + tiny_models.dims.pixel_shape)[0]
    cfg = OptimConfig()
    _, s1, _ = predict_and_adapt(tiny_models, tiny_schedule, sampler, z_cond,
                                 x_obs, state, cfg, rng, MODE_PIXEL)
    assert np.any(s1.adam_m != 0)
    _, s2, _ = predict_and_adapt(tiny_models, tiny_schedule, sampler, z_cond,
                                 x_obs, s1, cfg, rng, MODE_PIXEL)
    assert s2.step_count == 2
    assert np.any(s2.adam_v > s1.adam_v)
