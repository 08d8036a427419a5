import numpy as np
import pytest

from pathgen import autodiff as ad
from pathgen.crossmodal import CrossmodalConfig, PatchSet, init_pathgen
from pathgen.diffusion import (GaussianPrior, PathGenModel, TrainConfig, build_schedule,
                               diffusion_loss, forward_sample, reverse_step, sample,
                               schedule_from_betas, train_pathgen, train_step)

TINY = CrossmodalConfig(group_sizes=(2, 2, 2, 2, 2, 2), patch_dim=4, embed_dim=8, hidden=8,
                        heads=2, ff_mult=2)


class StubModel:
    """Noise predictor given as a plain function of (x_t, t)."""

    def __init__(self, fn, dim, schedule=None):
        self.fn, self.dim, self.schedule = fn, dim, schedule

    def predict(self, x_t, t, patches, mask=None):
        return self.fn(x_t, t)


def _patches(n, m=3, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return [PatchSet(rng.normal(size=(m, d)), [(0, j) for j in range(m)]) for _ in range(n)]


# -- schedule ---------------------------------------------------------------

def test_alpha_bar_running_product():
    s = schedule_from_betas([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024], rtol=1e-12)


def test_single_step_schedule():
    s = schedule_from_betas([0.25])
    assert s.alpha_bar[0] == pytest.approx(0.75)
    assert s.sigma[0] == pytest.approx(0.0)


def test_reference_schedule_ends_near_pure_noise():
    s = build_schedule(1000)
    assert s.alpha_bar[-1] < 1e-3
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("bad", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedules(bad):
    with pytest.raises(ValueError):
        build_schedule(*bad)


def test_posterior_std_formula():
    s = schedule_from_betas([0.1, 0.2])
    expected = (1 - 0.9) / (1 - 0.72) * 0.2
    assert s.sigma[1] ** 2 == pytest.approx(expected)


# -- forward corruption -----------------------------------------------------

def test_forward_sample_noise_free():
    s = schedule_from_betas([0.1, 0.2, 0.3, 0.4])
    x0 = np.array([1.0, -2.0])
    np.testing.assert_allclose(forward_sample(x0, 2, np.zeros(2), s), np.sqrt(0.72) * x0)
    assert np.sqrt(0.72) == pytest.approx(0.8485, abs=1e-4)


def test_forward_sample_from_zero():
    s = build_schedule(10)
    eps = np.array([0.5, -1.5])
    np.testing.assert_allclose(forward_sample(np.zeros(2), 7, eps, s),
                               np.sqrt(1 - s.alpha_bar[6]) * eps)


def test_forward_then_invert_recovers_x0():
    s = build_schedule(100)
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    t = np.array([1, 10, 50, 99, 100])
    xt = forward_sample(x0, t, eps, s)
    ab = s.alpha_bar[t - 1][:, None]
    np.testing.assert_allclose((xt - np.sqrt(1 - ab) * eps) / np.sqrt(ab), x0, atol=1e-5)


def test_forward_sample_range_check():
    with pytest.raises(ValueError):
        forward_sample(np.zeros(2), 0, np.zeros(2), build_schedule(5))


def test_closed_form_matches_iterated_moments():
    s = build_schedule(20, 0.01, 0.2)
    rng = np.random.default_rng(0)
    n, t = 10_000, 20
    x0 = rng.normal(1.5, 0.5, size=n)
    x = x0.copy()
    for i in range(t):
        x = np.sqrt(s.alpha[i]) * x + np.sqrt(s.beta[i]) * rng.normal(size=n)
    direct = forward_sample(x0, t, rng.normal(size=n), s)
    assert abs(x.mean() - direct.mean()) < 0.02
    assert abs(x.std() - direct.std()) < 0.02


# -- reverse step and sampling ----------------------------------------------

def test_reverse_step_zero_noise_prediction():
    s = build_schedule(5)
    x = np.array([0.3, -1.2])
    out = reverse_step(np.zeros(2), x, 3, s, np.zeros(2))
    np.testing.assert_allclose(out, x / np.sqrt(s.alpha[2]), rtol=1e-12)


def test_reverse_step_last_step_ignores_z():
    s = build_schedule(5)
    x = np.array([0.3])
    a = reverse_step(np.array([0.1]), x, 1, s, np.array([100.0]))
    b = reverse_step(np.array([0.1]), x, 1, s, np.array([0.0]))
    assert a.tolist() == b.tolist()


def test_reverse_step_scalar_arithmetic():
    s = schedule_from_betas([0.1, 0.2])
    # t=2: alpha 0.8, abar 0.72, sigma^2 = 0.1/0.28*0.2
    x, e, z = 0.7, 0.4, -0.5
    expected = (x - 0.2 / np.sqrt(0.28) * e) / np.sqrt(0.8) + np.sqrt(0.1 / 0.28 * 0.2) * z
    out = reverse_step(np.array([e]), np.array([x]), 2, s, np.array([z]))
    assert out[0] == pytest.approx(expected, abs=1e-6)


def test_single_step_sampler_divides_by_sqrt_alpha():
    s = schedule_from_betas([0.3])
    model = StubModel(lambda x, t: np.zeros_like(x), 3)
    out = sample(model, _patches(1, d=4)[0], s, 7)
    x_T = np.random.default_rng(7).standard_normal((2, 3))[0].astype(np.float32)
    np.testing.assert_allclose(out, x_T / np.sqrt(0.7), rtol=1e-6)


def test_sampler_recovers_gaussian_with_analytic_noise_oracle():
    # the default 1000-step schedule; 100 steps with the same betas leave abar_T ~0.36
    # and the sampled mean lands 12% low
    s = build_schedule(1000)
    mu, sd = 2.0, 0.5

    def oracle(x, t):
        ab = s.alpha_bar[t - 1]
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * mu) / (ab * sd ** 2 + 1 - ab)

    n = 10_000
    out = sample(StubModel(oracle, 1), [_patches(1)[0]] * n, s, list(range(n)))
    assert abs(out.mean() - mu) / mu < 0.05
    assert abs(out.var() - sd ** 2) / sd ** 2 < 0.05


def test_sampling_is_deterministic_and_batch_invariant():
    s = build_schedule(10, 1e-2, 0.3)
    params = init_pathgen(TINY, 0)
    model = PathGenModel(params, TINY, s)
    ps = _patches(3)
    a = sample(model, ps, s, [1, 2, 3])
    b = sample(model, ps, s, [1, 2, 3])
    c = sample(model, ps[1], s, 2)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a[1], c, rtol=1e-5, atol=1e-6)
    assert np.all(np.isfinite(a))


# -- prior head -------------------------------------------------------------

def test_gaussian_prior_head_is_exact_posterior_noise():
    rng = np.random.default_rng(0)
    cov = np.array([[1.0, 0.6], [0.6, 0.5]])
    data = rng.multivariate_normal([1.0, -1.0], cov, size=20_000)
    prior = GaussianPrior.fit(data)
    s = build_schedule(1000)
    model = StubModel(lambda x, t: np.asarray(prior.head(np.full(len(x), t), s)(x, 0 * x)), 2)
    out = sample(model, [_patches(1)[0]] * 5000, s, list(range(5000)))
    np.testing.assert_allclose(out.mean(0), [1.0, -1.0], atol=0.05)
    np.testing.assert_allclose(np.cov(out, rowvar=False), cov, atol=0.06)


def test_identity_prior_head():
    s = build_schedule(10)
    head = GaussianPrior.identity(3).head(np.array([4]), s)
    x = np.ones((1, 3), np.float32)
    np.testing.assert_allclose(head(x, np.zeros_like(x)), np.sqrt(1 - s.alpha_bar[3]) * x, rtol=1e-5)


def test_prior_array_round_trip():
    p = GaussianPrior.fit(np.random.default_rng(1).normal(size=(50, 4)))
    q = GaussianPrior.from_arrays(p.to_arrays())
    for k in ("mean", "basis", "var"):
        assert getattr(p, k).tobytes() == getattr(q, k).tobytes()


# -- loss and training ------------------------------------------------------

def _loss_with_stub(eps_fn, n=10_000, dim=4, seed=0):
    s = build_schedule(50)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n, dim))
    t = rng.integers(1, 51, size=n)
    eps = rng.normal(size=x0.shape)
    return float(np.mean((eps_fn(x0, t, eps) - eps) ** 2))


def test_loss_zero_for_noise_oracle():
    assert _loss_with_stub(lambda x0, t, eps: eps) == 0.0


def test_loss_one_for_zero_predictor():
    assert _loss_with_stub(lambda x0, t, eps: 0 * eps) == pytest.approx(1.0, abs=0.05)


def test_diffusion_loss_is_mean_squared_error():
    s = build_schedule(10)
    params = init_pathgen(TINY, 0)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 12)).astype(np.float32)
    eps = rng.normal(size=(2, 12)).astype(np.float32)
    t = np.array([3, 8])
    patches = np.stack([p.embeddings for p in _patches(2)])
    g = ad.trace(lambda p, x: diffusion_loss(p, x0, t, eps, x["patches"], s, TINY),
                 params, {"patches": patches})
    model = PathGenModel(params, TINY, s)
    eps_hat = model.predict(forward_sample(x0, t, eps, s), t, patches)
    assert float(g.output_value) == pytest.approx(float(np.mean((eps_hat - eps) ** 2)), rel=1e-5)


def test_train_step_returns_grads_for_every_param():
    s = build_schedule(10)
    params = init_pathgen(TINY, 0)
    patches = np.stack([p.embeddings for p in _patches(4)])
    loss, grads = train_step(params, np.zeros((4, 12), np.float32), patches, s,
                             np.random.default_rng(0), TINY)
    assert np.isfinite(loss)
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape for k in params)


def test_toy_linear_denoiser_loss_decreases():
    # 1-D data, linear eps model a * x_t + b * abar_t + c
    s = build_schedule(20, 1e-2, 0.3)
    rng = np.random.default_rng(0)
    params = {"w": np.zeros(3, np.float32)}
    state = ad.adam_init(params, 0.02)
    losses = []
    for _ in range(200):
        x0 = rng.normal(1.0, 0.3, size=(64, 1)).astype(np.float32)
        t = rng.integers(1, 21, size=64)
        eps = rng.normal(size=x0.shape).astype(np.float32)
        feats = np.concatenate([forward_sample(x0, t, eps, s), s.alpha_bar[t - 1][:, None],
                                np.ones((64, 1))], axis=1)
        loss, grads = ad.value_and_grad(
            lambda p, x: ad.sum_of_squares(x["f"] @ p["w"].reshape(3, 1) - x["e"]) * (1 / 64),
            params, {"f": feats, "e": eps})
        ad.adam_step(params, grads, state)
        losses.append(loss)
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]
    assert smooth[-1] < 0.9 * smooth[0]


def test_resumed_training_matches_fresh_run():
    s = build_schedule(10, 1e-2, 0.3)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(16, 12)).astype(np.float32)
    ps = _patches(16)
    tc = TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=3)
    _, _, full = train_pathgen(X, ps, TINY, s, tc)
    p1, o1, first = train_pathgen(X, ps, TINY, s, TrainConfig(epochs=1, batch_size=8, lr=1e-3, seed=3))
    _, _, second = train_pathgen(X, ps, TINY, s, tc, p1, o1, start_epoch=1)
    assert first + second == full


def test_averaged_sampling_is_mean_of_seeded_draws():
    s = build_schedule(10, 1e-2, 0.3)
    model = PathGenModel(init_pathgen(TINY, 0), TINY, s)
    ps = _patches(2)
    mean = sample(model, ps, s, [4, 5], n_samples=3)
    draws = [sample(model, ps, s, [(4, k), (5, k)]) for k in range(3)]
    np.testing.assert_allclose(mean, np.mean(draws, axis=0), rtol=1e-6)
    with pytest.raises(ValueError):
        sample(model, ps, s, [4, 5], n_samples=0)
