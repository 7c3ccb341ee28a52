import warnings

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal
from sklearn.mixture import GaussianMixture as SkGaussianMixture

from idon import bayes
from idon.bayes import (
    DegenerateComponentWarning,
    GaussianMixture,
    ObservationModel,
    batch_means_stderr,
    fit_gmm,
    pcn_mcmc,
    posterior_update,
    pushback_sample,
    pushforward_log_density,
    pushforward_samples,
    rw_metropolis,
)
from idon.networks import Architecture, branch_forward, init_params

from conftest import random_spd
from test_networks import perturbed_params


def linear_gaussian_posterior(m, s, y, s_hat, sigma2):
    """Information-form posterior of N(m, S) under s_hat = Y b + N(0, sigma2 I)."""
    prec = y.T @ y / sigma2 + np.linalg.inv(s)
    cov = np.linalg.inv(prec)
    mean = cov @ (y.T @ s_hat / sigma2 + np.linalg.solve(s, m))
    return mean, cov


def random_mixture(rng, m, d):
    w = rng.dirichlet(np.ones(m))
    return GaussianMixture(w, rng.standard_normal((m, d)), np.stack([random_spd(rng, d, 5.0) for _ in range(m)]))


# -- mixture object -------------------------------------------------------------


def test_mixture_logpdf_matches_scipy(rng):
    mix = random_mixture(rng, 3, 4)
    x = rng.standard_normal((10, 4))
    ref = np.log(sum(w * multivariate_normal(mu, c).pdf(x) for w, mu, c in zip(mix.weights, mix.means, mix.covs)))
    assert np.allclose(mix.log_pdf(x), ref, rtol=1e-12)


def test_mixture_rejects_bad_weights():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], np.zeros((2, 1)), np.ones((2, 1, 1)))


def test_mixture_sampling_moments(rng):
    mix = random_mixture(rng, 2, 2)
    x, comp = mix.sample(200000, seed=0)
    mean = mix.weights @ mix.means
    assert np.allclose(x.mean(axis=0), mean, atol=0.02)
    assert abs(np.mean(comp == 0) - mix.weights[0]) < 0.005


# -- EM -------------------------------------------------------------------------


def test_em_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    a = rng.multivariate_normal([-5, 0], [[1.0, 0.3], [0.3, 0.5]], 3000)
    b = rng.multivariate_normal([5, 2], [[0.5, 0.0], [0.0, 2.0]], 1000)
    mix = fit_gmm(np.vstack([a, b]), 2, seed=0)
    order = np.argsort(mix.means[:, 0])
    assert np.allclose(mix.weights[order], [0.75, 0.25], atol=0.01)
    assert np.allclose(mix.means[order], [[-5, 0], [5, 2]], atol=0.1)
    assert np.allclose(mix.covs[order[0]], [[1.0, 0.3], [0.3, 0.5]], atol=0.1)


def test_em_likelihood_not_worse_than_sklearn():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.standard_normal((500, 3)), rng.standard_normal((300, 3)) * 0.5 + 2.0])
    ours = fit_gmm(x, 2, seed=1)
    sk = SkGaussianMixture(2, covariance_type="full", reg_covar=1e-8, tol=1e-10, max_iter=500, n_init=5, random_state=0).fit(x)
    assert ours.log_pdf(x).mean() >= sk.score(x) - 1e-6


def test_em_single_component_is_sample_moments(rng):
    x = rng.standard_normal((400, 3)) @ np.array([[1, 0, 0], [0.5, 1, 0], [0, 0.2, 2.0]])
    mix = fit_gmm(x, 1)
    assert np.allclose(mix.means[0], x.mean(axis=0), atol=1e-12)
    assert np.allclose(mix.covs[0], np.cov(x.T, bias=True) + 1e-8 * np.eye(3), atol=1e-10)


def test_em_prunes_degenerate_component():
    x = np.random.default_rng(0).standard_normal((50, 2))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mix = fit_gmm(x, 2, seed=0, min_weight=0.9)
    assert mix.n_components == 1 or any(issubclass(w.category, DegenerateComponentWarning) for w in caught)
    assert mix.weights.sum() == pytest.approx(1.0)


def test_em_is_deterministic(rng):
    x = rng.standard_normal((200, 2))
    a, b = fit_gmm(x, 2, seed=4), fit_gmm(x, 2, seed=4)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.weights, b.weights)


# -- conjugate update ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_single_component_update_matches_information_form(seed):
    rng = np.random.default_rng(seed)
    d, k = 4, 7
    m, s = rng.standard_normal(d), random_spd(rng, d, 20.0)
    y = rng.standard_normal((k, d))
    s_hat = rng.standard_normal(k)
    post = posterior_update(GaussianMixture([1.0], m[None], s[None]), ObservationModel(s_hat, 0.3, y))
    mean, cov = linear_gaussian_posterior(m, s, y, s_hat, 0.3)
    assert np.allclose(post.means[0], mean, rtol=1e-10, atol=1e-12)
    assert np.allclose(post.covs[0], cov, rtol=1e-10, atol=1e-12)
    assert post.weights[0] == 1.0


def test_weights_use_marginal_likelihood(rng):
    # weight ratio = w1 N(s_hat | Y m1, D1) / w2 N(s_hat | Y m2, D2)
    d, k = 3, 5
    prior = random_mixture(rng, 2, d)
    y = rng.standard_normal((k, d))
    s_hat = rng.standard_normal(k)
    post = posterior_update(prior, ObservationModel(s_hat, 0.5, y))
    ev = [w * multivariate_normal(y @ mu, 0.5 * np.eye(k) + y @ c @ y.T).pdf(s_hat) for w, mu, c in zip(prior.weights, prior.means, prior.covs)]
    assert np.allclose(post.weights, np.array(ev) / sum(ev), rtol=1e-10)


def test_mixture_density_consistency(rng):
    prior = random_mixture(rng, 2, 3)
    obs = ObservationModel(rng.standard_normal(5), 0.2, rng.standard_normal((5, 3)))
    post = posterior_update(prior, obs)
    b = rng.standard_normal((200, 3)) * 2
    diff = post.log_pdf(b) - prior.log_pdf(b) - obs.log_likelihood(b)
    assert np.ptp(diff) < 1e-8


def test_huge_noise_returns_prior(rng):
    prior = random_mixture(rng, 2, 3)
    post = posterior_update(prior, ObservationModel(rng.standard_normal(4), 1e12, rng.standard_normal((4, 3))))
    assert np.allclose(post.weights, prior.weights, atol=1e-9)
    assert np.allclose(post.means, prior.means, atol=1e-9)
    assert np.allclose(post.covs, prior.covs, atol=1e-9)


def test_tiny_noise_weights_do_not_underflow(rng):
    prior = random_mixture(rng, 2, 3)
    y = rng.standard_normal((50, 3))
    post = posterior_update(prior, ObservationModel(y @ prior.means[0] + 0.1, 1e-10, y))
    assert np.all(np.isfinite(post.weights)) and post.weights.sum() == pytest.approx(1.0)


def test_posterior_covariances_positive_definite(rng):
    prior = random_mixture(rng, 2, 6)
    post = posterior_update(prior, ObservationModel(rng.standard_normal(40), 1e-8, rng.standard_normal((40, 6))))
    for c in post.covs:
        assert np.all(np.linalg.eigvalsh(c) > 0)


def test_observation_model_validation():
    with pytest.raises(ValueError):
        ObservationModel(np.zeros(3), 0.0, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        ObservationModel(np.zeros(3), 1.0, np.zeros((4, 2)))


# -- pushforward / pushback ------------------------------------------------------


def test_pushforward_and_pushback_are_inverse():
    arch = Architecture(dim=6, n_blocks=3)
    params = perturbed_params(arch, 0, scale=0.3)
    mix = GaussianMixture([1.0], np.zeros((1, 6)), np.eye(6)[None])
    res = pushback_sample(mix, params, arch, 100, seed=1)
    b_again = np.asarray(branch_forward(params["branch"], res.u_samples, arch)[0])
    assert np.max(np.abs(b_again - res.b_samples)) < 1e-9
    assert np.allclose(res.u_mean, res.u_samples.mean(axis=0))


def test_pushforward_samples_use_sampler(rng):
    arch = Architecture(dim=4)
    params = init_params(arch, 0)
    sampler = lambda n, seed: np.random.default_rng(seed).standard_normal((n, 4))  # noqa: E731
    b = pushforward_samples(params, arch, sampler, 5, seed=3)
    assert np.allclose(b, branch_forward(params["branch"], sampler(5, 3), arch)[0])


def test_pushforward_density_identity_and_shift(rng):
    # vanishing subnetworks: two blocks compose two reversals, so the branch is the identity
    arch = Architecture(dim=4, n_blocks=2)
    zero = jax.tree_util.tree_map(jnp.zeros_like, init_params(arch, 0))
    prior = multivariate_normal(np.arange(4.0), np.diag([1.0, 2.0, 3.0, 4.0]))
    b = rng.standard_normal((20, 4))
    assert np.allclose(pushforward_log_density(zero, arch, b, prior.logpdf), prior.logpdf(b), rtol=1e-12)
    # a constant shift of the second half in the first block translates b[:, :2] (after the reversals)
    shifted = jax.tree_util.tree_map(jnp.zeros_like, init_params(arch, 0))
    shifted["branch"][0]["r"][-1][1] = jnp.array([0.5, -1.0])
    u = b.copy()
    u[:, 2:] -= [0.5, -1.0]
    got = pushforward_log_density(shifted, arch, b, prior.logpdf)
    assert np.allclose(got, prior.logpdf(u), rtol=1e-12)
    # a constant log-scale c multiplies the second half by exp(c): density picks up -2c
    scaled = jax.tree_util.tree_map(jnp.zeros_like, init_params(arch, 0))
    scaled["branch"][0]["k"][-1][1] = jnp.array([0.3, 0.3])
    c = 5.0 * np.tanh(0.3 / 5.0)
    u = b.copy()
    u[:, 2:] *= np.exp(-c)
    got = pushforward_log_density(scaled, arch, b, prior.logpdf)
    assert np.allclose(got, prior.logpdf(u) - 2 * c, rtol=1e-12)


# -- MCMC ----------------------------------------------------------------------------


def test_pcn_linear_gaussian_posterior():
    rng = np.random.default_rng(0)
    d = 3
    prior_cov = random_spd(rng, d, 3.0)
    low = np.linalg.cholesky(prior_cov)
    y = rng.standard_normal((4, d))
    s_hat = rng.standard_normal(4)
    sigma2 = 0.5
    mean, cov = linear_gaussian_posterior(np.zeros(d), prior_cov, y, s_hat, sigma2)
    ll = lambda u: -0.5 * np.sum((s_hat - y @ u) ** 2) / sigma2  # noqa: E731
    chain = pcn_mcmc(ll, 0.0, low, beta=0.5, n_samples=8000, seed=1)
    burn = 1000
    se = batch_means_stderr(chain.samples[burn:])
    assert np.all(np.abs(chain.samples[burn:].mean(axis=0) - mean) < 4 * se)
    assert 0.05 < chain.acceptance_rate < 0.95


def test_pcn_prior_only_always_accepts():
    chain = pcn_mcmc(lambda u: 0.0, 0.0, np.eye(2), beta=0.3, n_samples=100, seed=0)
    assert chain.acceptance_rate == 1.0


def test_pcn_rejects_bad_beta():
    with pytest.raises(ValueError):
        pcn_mcmc(lambda u: 0.0, 0.0, np.eye(2), beta=1.0, n_samples=1, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10, allow_nan=False))
def test_reflection_stays_in_box(x):
    r = bayes._reflect(np.array([x]), 0.0, 1.0)[0]
    assert 0.0 <= r <= 1.0
    if 0 <= x <= 1:
        assert r == pytest.approx(x)


def test_rw_metropolis_uniform_target():
    chain = rw_metropolis(lambda x: 0.0, np.full(2, 0.5), step=0.3, n_samples=20000, seed=0)
    x = chain.samples
    assert np.all((x >= 0) & (x <= 1))
    assert np.allclose(x.mean(axis=0), 0.5, atol=0.03)
    assert np.allclose(x.var(axis=0), 1 / 12, atol=0.01)


def test_batch_means_stderr_iid():
    x = np.random.default_rng(0).standard_normal((100000, 2))
    assert np.allclose(batch_means_stderr(x), 1 / np.sqrt(100000), rtol=0.3)
