"""Acceptance suite: exact property checks (1-8) and desk-scale reproductions (9-15).

Each test prints one ``criterion NN: PASS|FAIL`` line; the lines are repeated
in the terminal summary.  The reproduction runs train real models and take
tens of minutes on one core.
"""

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy.linalg import cho_solve, cholesky

from idon import bayes
from idon.bayes import GaussianMixture, ObservationModel, posterior_update
from idon.estimator import InvertibleDeepONet, MixturePosterior
from idon.evaluation import relative_errors
from idon.networks import Architecture, branch_forward, branch_inverse, init_params
from idon.operator import trunk_jets, trunk_rows
from idon.problems import gp_cholesky, make_dataset, problem_spec, residual_operator
from idon.problems.dataset import solve_outputs
from idon.problems.features import field_on_grid
from idon.problems.solvers import solve_antiderivative, solve_darcy, solve_reaction_diffusion
from idon.training import LossWeights, active_terms, collocation_points, make_step

from conftest import random_spd
from test_networks import perturbed_params

# -- exact properties ------------------------------------------------------------


def random_net(arch, seed):
    """Glorot-initialized parameters plus fan-in scaled noise on every layer (incl. the zero ones)."""
    rng = np.random.default_rng([seed, 7])

    def jitter(a):
        scale = 0.5 / np.sqrt(a.shape[0]) if a.ndim == 2 else 0.1
        return a + scale * rng.standard_normal(a.shape)

    return jax.tree_util.tree_map(jitter, init_params(arch, seed))


def test_01_invertibility(acceptance):
    rng = np.random.default_rng(1)
    worst, n = 0.0, 0
    for dim, count in ((4, 334), (16, 333), (100, 333)):
        for i in range(count):
            arch = Architecture(dim=dim, n_blocks=int(rng.integers(2, 5)), coupling_hidden=((), (8,))[i % 2])
            params = random_net(arch, 1000 * dim + i)
            x = rng.standard_normal((1, dim)) * 10 ** rng.uniform(-1, 1)
            b, _ = branch_forward(params["branch"], x, arch)
            back = np.asarray(branch_inverse(params["branch"], b, arch))
            worst = max(worst, np.max(np.abs(back - x)) / (1 + np.max(np.abs(x))))
            n += 1
    acceptance(1, worst < 1e-9, f"{n} nets, max round-trip error / (1+|x|inf) = {worst:.2e} (< 1e-9)")


def test_02_logdet(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        dim = int(rng.integers(2, 9))
        arch = Architecture(dim=dim, n_blocks=int(rng.integers(2, 5)), coupling_hidden=((), (6,))[i % 2])
        params = perturbed_params(arch, i, scale=0.4)
        x = rng.standard_normal(dim)
        f = lambda z: np.asarray(branch_forward(params["branch"], z[None], arch)[0][0])  # noqa: E731
        h = 1e-5
        jac = np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(dim)], axis=1)
        det = abs(np.linalg.det(jac))
        logdet = float(branch_forward(params["branch"], x[None], arch)[1][0])
        worst = max(worst, abs(np.exp(logdet) - det) / det)
    acceptance(2, worst < 1e-5, f"100 nets D<=8, max relative |det J| error = {worst:.2e} (< 1e-5)")


def _flatten(tree):
    leaves, treedef = jax.tree_util.tree_flatten(tree)
    sizes = [leaf.size for leaf in leaves]
    flat = np.concatenate([np.ravel(leaf) for leaf in leaves])

    def unflatten(v):
        out, pos = [], 0
        for leaf, n in zip(leaves, sizes):
            out.append(jnp.asarray(v[pos : pos + n].reshape(leaf.shape)))
            pos += n
        return jax.tree_util.tree_unflatten(treedef, out)

    return flat, unflatten


def test_03_full_loss_gradient(acceptance):
    # reaction-diffusion exercises every term: lf, li, bc, res (second derivatives), ui
    p = problem_spec("reaction_diffusion", dim=4, n_obs=6, n_res=5, n_bc=3, fine_factor=4)
    arch = Architecture(dim=4, coord_dim=2, trunk_hidden=(8, 8))
    ds = make_dataset(p, 2, 2, seed=0)
    op = residual_operator(p)
    weights = LossWeights()
    active = active_terms(weights, True, True, p)
    _, total_loss = make_step(arch, op, weights, active, 1e-6, False)
    colloc = collocation_points(p, p.n_res, 0)
    batch = {
        "u_l": jnp.asarray(ds.inputs[2:]),
        "s_l": jnp.asarray(ds.outputs[2:]),
        "u_u": jnp.asarray(ds.inputs[:2]),
        "data": {k: jnp.asarray(v) for k, v in op.prepare(ds.inputs[:2], ds.fine_inputs[:2], colloc).items()},
    }
    args = (batch, jnp.asarray(ds.coords), jnp.asarray(colloc), jnp.asarray(p.boundary_points(p.n_bc)))
    params = perturbed_params(arch, 3, scale=0.3)
    flat, unflatten = _flatten(params)
    f = jax.jit(lambda v: total_loss(unflatten(v), *args)[0])
    grad = _flatten(jax.grad(lambda q: total_loss(q, *args)[0])(params))[0]
    h = 1e-6
    fd = np.empty_like(flat)
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = h
        fd[i] = (float(f(flat + e)) - float(f(flat - e))) / (2 * h)
    rel = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
    acceptance(
        3,
        rel.max() < 1e-4 and set(active) == {"lf", "li", "bc", "res", "ui"},
        f"{len(flat)} parameters, terms {','.join(active)}, max relative error {rel.max():.2e} (< 1e-4)",
    )


def test_04_trunk_derivatives(acceptance):
    rng = np.random.default_rng(4)
    arch = Architecture(dim=4, coord_dim=2, trunk_hidden=(20, 20, 20))
    trunk = perturbed_params(arch, 4, scale=0.2)["trunk"]
    x = rng.uniform(size=(100, 2))
    direction = rng.standard_normal(2)
    direction /= np.linalg.norm(direction)
    jet = trunk_jets(trunk, x, direction)

    def f(z):
        return np.asarray(trunk_rows(trunk, z))

    h1, h2 = 1e-6, 1e-4
    d1 = (f(x + h1 * direction) - f(x - h1 * direction)) / (2 * h1)
    d2 = (f(x + h2 * direction) - 2 * f(x) + f(x - h2 * direction)) / h2**2
    floor = 1e-3
    e1 = np.max(np.abs(np.asarray(jet.d1) - d1) / np.maximum(np.abs(d1), floor))
    e2 = np.max(np.abs(np.asarray(jet.d2) - d2) / np.maximum(np.abs(d2), floor))
    acceptance(4, max(e1, e2) < 1e-4, f"100 points, relative error d1 {e1:.2e}, d2 {e2:.2e} (< 1e-4)")


def _information_form(m, s, y, s_hat, sigma2):
    """Independent linear-Gaussian posterior via precision matrices."""
    prec = y.T @ y / sigma2 + np.linalg.inv(s)
    lp = cholesky(prec, lower=True)
    cov = cho_solve((lp, True), np.eye(len(m)))
    mean = cov @ (y.T @ s_hat / sigma2 + np.linalg.solve(s, m))
    return mean, cov


def test_05_conjugate_oracle(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        d, k = int(rng.integers(2, 11)), int(rng.integers(1, 16))
        m, s = rng.standard_normal(d), random_spd(rng, d, 10.0)
        y = rng.standard_normal((k, d))
        s_hat = rng.standard_normal(k)
        sigma2 = 10 ** rng.uniform(-2, 0)
        post = posterior_update(GaussianMixture([1.0], m[None], s[None]), ObservationModel(s_hat, sigma2, y))
        mean, cov = _information_form(m, s, y, s_hat, sigma2)
        worst = max(
            worst,
            np.linalg.norm(post.means[0] - mean) / np.linalg.norm(mean),
            np.linalg.norm(post.covs[0] - cov) / np.linalg.norm(cov),
        )
    acceptance(5, worst < 1e-10, f"50 instances, max relative error {worst:.2e} (< 1e-10)")


def test_06_density_consistency(acceptance):
    rng = np.random.default_rng(6)
    prior = GaussianMixture(
        [0.3, 0.7], rng.standard_normal((2, 3)), np.stack([random_spd(rng, 3, 5.0), random_spd(rng, 3, 5.0)])
    )
    obs = ObservationModel(rng.standard_normal(5), 0.5, rng.standard_normal((5, 3)))
    post = posterior_update(prior, obs)
    b = rng.standard_normal((1000, 3)) * 1.5
    diff = post.log_pdf(b) - prior.log_pdf(b) - obs.log_likelihood(b)
    spread = float(np.ptp(diff))
    acceptance(6, spread < 1e-8, f"1000 points, spread of log posterior - log(prior x likelihood) = {spread:.2e} (< 1e-8)")


def test_07_solver_convergence(acceptance):
    # trapezoid
    errs = []
    for n in (21, 41, 81, 161):
        g = np.linspace(0, 1, n)
        errs.append(np.abs(solve_antiderivative(np.cos(3 * g), g) - np.sin(3 * g) / 3).max())
    trap = np.log2(np.array(errs[:-1]) / errs[1:]).min()
    # Darcy: self-convergence against a fine reference
    c = np.random.default_rng(7).uniform(size=64) * 0.3
    ref = solve_darcy(field_on_grid(c, 257))
    errs = []
    for n in (17, 33, 65):
        step = 256 // (n - 1)
        errs.append(np.abs(solve_darcy(field_on_grid(c, n)) - ref[::step, ::step]).max())
    darcy = np.log2(np.array(errs[:-1]) / errs[1:]).min()
    # reaction-diffusion manufactured solution s = t sin(pi x)
    d, k = 0.01, 0.01
    exact = lambda x, t: t * np.sin(np.pi * x)  # noqa: E731
    forcing = lambda x, t: np.sin(np.pi * x) * (1 + d * np.pi**2 * t) - k * exact(x, t) ** 2  # noqa: E731
    errs = []
    for nt in (11, 21, 41):
        x, t, s = solve_reaction_diffusion(forcing, nx=401, nt=nt, diffusion=d, reaction=k)
        errs.append(np.abs(s - exact(x[None, :], t[:, None])).max())
    ratios = np.array(errs[:-1]) / errs[1:]
    ok = trap >= 1.9 and darcy >= 1.9 and np.all(np.abs(ratios - 2) <= 0.4)
    acceptance(
        7, ok, f"trapezoid order {trap:.2f}, Darcy order {darcy:.2f} (>= 1.9); RD error ratios {np.round(ratios, 3).tolist()} (2 +- 20%)"
    )


def test_08_pcn(acceptance):
    rng = np.random.default_rng(8)
    d = 4
    prior_cov = random_spd(rng, d, 5.0)
    y = rng.standard_normal((6, d))
    s_hat = rng.standard_normal(6)
    sigma2 = 0.5
    mean, _ = _information_form(np.zeros(d), prior_cov, y, s_hat, sigma2)
    chain = bayes.pcn_mcmc(
        lambda u: -0.5 * np.sum((s_hat - y @ u) ** 2) / sigma2,
        0.0,
        np.linalg.cholesky(prior_cov),
        beta=0.4,
        n_samples=20_000,
        seed=8,
    )
    burn = 2000
    se = bayes.batch_means_stderr(chain.samples[burn:])
    z = np.abs(chain.samples[burn:].mean(axis=0) - mean) / se
    acceptance(8, bool(np.all(z < 3)), f"2e4 samples, |mean - exact| / MC s.e. = {np.round(z, 2).tolist()} (< 3)")


# -- desk-scale reproductions -------------------------------------------------------

TEST_SEED = 10_000
N_TEST = 200

# shared optimizer settings for the reproduction runs
TRAIN = dict(clip_norm=10.0, eps=1e-4, random_state=0)


def _fit(problem, n_unlabeled, n_labeled, iterations, labeled_per_batch=10, **arch):
    train = make_dataset(problem, n_unlabeled, n_labeled, seed=0)
    test = make_dataset(problem, 0, N_TEST, seed=TEST_SEED, coords=train.coords)
    model = InvertibleDeepONet(
        problem, iterations=iterations, labeled_per_batch=labeled_per_batch, **TRAIN, **arch
    ).fit_dataset(train)
    return model, test


def _errors(model, test):
    fwd = relative_errors(model.predict(test.inputs), test.outputs)
    inv = relative_errors(model.predict_inverse(test.outputs), test.inputs)
    return float(fwd.mean()), float(inv.mean())


def test_09_antiderivative(acceptance):
    p = problem_spec("antiderivative")
    model, test = _fit(p, 2000, 200, 10_000)
    fwd, inv = _errors(model, test)
    acceptance(
        9,
        fwd < 0.05 and inv < 0.10,
        f"antiderivative N_u=2000, 10% labeled, 1e4 iterations: forward {fwd:.4f} (< 0.05), inverse {inv:.4f} (< 0.10)",
    )


def test_10_labeled_trend(acceptance):
    p = problem_spec("antiderivative")
    iterations = LABELED_TREND_ITERATIONS
    few, test = _fit(p, 2000, 20, iterations, labeled_per_batch=1)
    full, _ = _fit(p, 2000, 2000, iterations, labeled_per_batch=100)
    _, inv_few = _errors(few, test)
    _, inv_full = _errors(full, test)
    acceptance(
        10,
        inv_full < inv_few,
        f"antiderivative N_u=2000, {iterations} iterations: inverse error 100% labeled {inv_full:.4f} < 1% labeled {inv_few:.4f}",
    )


LABELED_TREND_ITERATIONS = 3000


@pytest.fixture(scope="module")
def rd_model():
    p = problem_spec("reaction_diffusion")
    return _fit(p, 1000, 100, 20_000)


def test_11_reaction_diffusion(acceptance, rd_model):
    fwd, inv = _errors(*rd_model)
    acceptance(
        11,
        fwd < 0.08 and inv < 0.12,
        f"reaction-diffusion N_u=1000, 10% labeled, 2e4 iterations: forward {fwd:.4f} (< 0.08), inverse {inv:.4f} (< 0.12)",
    )


DARCY_ITERATIONS = 5000
DARCY_ARCH = dict(trunk_hidden=(64,) * 5)


def test_12_darcy_features(acceptance):
    p = problem_spec("darcy_features", solver_n=65, n_obs=961, n_res=961)
    labeled, test = _fit(p, 500, 500, DARCY_ITERATIONS, **DARCY_ARCH)
    unlabeled, _ = _fit(p, 500, 0, DARCY_ITERATIONS, **DARCY_ARCH)
    fwd, inv = _errors(labeled, test)
    _, inv_unl = _errors(unlabeled, test)
    acceptance(
        12,
        fwd < 0.10 and inv < inv_unl,
        f"Darcy features 65x65, K=961, {DARCY_ITERATIONS} iterations: forward {fwd:.4f} (< 0.10); "
        f"inverse with labels {inv:.4f} < without {inv_unl:.4f}",
    )


# -- Bayesian reaction-diffusion inverse problem -------------------------------------


@pytest.fixture(scope="module")
def rd_posterior(rd_model):
    model, test = rd_model
    post = MixturePosterior(n_components=2, n_prior_samples=10_000, n_posterior_samples=5000, random_state=0).fit(model)
    return post, test


def _observe(problem, test, n_obs, sigma2, seed=0, index=0):
    rng = np.random.default_rng([seed, 5])
    coords = problem.collocation_points(n_obs, rng)
    u_true = test.inputs[index]
    s = solve_outputs(problem, u_true, test.fine_inputs[index], coords)
    return coords, s + np.sqrt(sigma2) * rng.standard_normal(n_obs), u_true


def test_13_posterior_coverage(acceptance, rd_posterior):
    post, test = rd_posterior
    coords, s_obs, u_true = _observe(test.problem, test, 100, 0.001)
    res = post.infer(s_obs, coords, 0.001)
    inside = np.abs(u_true - res.u_mean) <= 2 * res.u_std
    acceptance(
        13,
        inside.mean() >= 0.9,
        f"RD, 100 observations, sigma2=0.001, M=2: truth within mean +- 2 std at {inside.mean():.0%} of coordinates (>= 90%)",
    )


def test_14_gmm_vs_pcn(acceptance, rd_posterior):
    post, test = rd_posterior
    p = test.problem
    sigma2 = 0.01
    coords, s_obs, _ = _observe(p, test, 100, sigma2)
    res = post.infer(s_obs, coords, sigma2)

    def log_likelihood(u):
        r = s_obs - solve_outputs(p, u, None, coords)
        return -0.5 * float(r @ r) / sigma2

    chol = gp_cholesky(p.gp, p.sensors()[:, 0])
    start = np.full(p.dim, p.gp.mean)
    chain = bayes.pcn_mcmc(log_likelihood, p.gp.mean, chol, beta=0.05, n_samples=20_000, seed=14, u0=start)
    mean, std = chain.summary(5000)
    within = np.abs(res.u_mean - mean) <= 2 * std
    acceptance(
        14,
        within.mean() >= 0.9,
        f"RD, sigma2=0.01, pCN 2e4 samples (acceptance {chain.acceptance_rate:.2f}): "
        f"|mean_GMM - mean_pCN| <= 2 std_pCN at {within.mean():.0%} of coordinates (>= 90%)",
    )


def test_15_uncertainty_monotonicity(acceptance, rd_posterior):
    post, test = rd_posterior
    p = test.problem
    std = {}
    for n_obs, sigma2 in ((25, 0.001), (100, 0.001), (100, 0.01)):
        coords, s_obs, _ = _observe(p, test, n_obs, sigma2)
        std[n_obs, sigma2] = float(post.infer(s_obs, coords, sigma2).u_std.mean())
    ok = std[25, 0.001] > std[100, 0.001] and std[100, 0.01] > std[100, 0.001]
    acceptance(
        15,
        ok,
        f"mean posterior std: 25 obs {std[25, 0.001]:.4f} > 100 obs {std[100, 0.001]:.4f}; "
        f"sigma2=0.01 {std[100, 0.01]:.4f} > sigma2=0.001 {std[100, 0.001]:.4f}",
    )
