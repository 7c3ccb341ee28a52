"""Gaussian-mixture posteriors over the branch output and reference MCMC samplers.

The pushforward prior on ``b = branch(u)`` is approximated by a Gaussian
mixture fitted to ancestral samples.  Since the observations are linear in
``b`` (``s = Y b``) with Gaussian noise, the posterior is again a mixture and
is available in closed form; posterior draws of ``b`` are mapped back to
``u`` with the analytic branch inverse.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from idon.exceptions import DegenerateComponent, NotPositiveDefinite
from idon.linalg import cho_solve, cholesky, cholesky_jitter

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class DegenerateComponentWarning(UserWarning):
    """A mixture component was pruned because its weight vanished."""


@dataclass
class GaussianMixture:
    """``sum_m w_m N(. | means[m], covs[m])``."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(len(self.weights), self.means.shape[1], self.means.shape[1])
        if self.means.shape[0] != len(self.weights):
            raise ValueError("one mean per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cholesky_factors(self) -> np.ndarray:
        return np.stack([cholesky_jitter(c) for c in self.covs])

    def component_log_pdf(self, x) -> np.ndarray:
        """``log N(x | mean_m, cov_m)`` with shape ``(n, M)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((x.shape[0], self.n_components))
        for m, low in enumerate(self.cholesky_factors()):
            out[:, m] = _mvn_logpdf(x, self.means[m], low)
        return out

    def log_pdf(self, x) -> np.ndarray:
        return logsumexp(self.component_log_pdf(x) + np.log(self.weights), axis=1)

    def sample(self, n: int, seed) -> tuple:
        """``n`` draws and their component labels."""
        rng = np.random.default_rng(seed)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        lows = self.cholesky_factors()
        out = self.means[comp] + np.einsum("nij,nj->ni", lows[comp], z)
        return out, comp

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, low: np.ndarray) -> np.ndarray:
    z = solve_triangular(low, (x - mean).T, lower=True)
    return -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(low))) - 0.5 * len(mean) * LOG_2PI


# --------------------------------------------------------------------------
# prior: ancestral sampling + EM


def pushforward_samples(params, arch, prior_sampler: Callable, n: int, seed) -> np.ndarray:
    """``b = branch(u)`` for ``u = prior_sampler(n, seed)``."""
    from idon.networks import branch_forward

    u = np.asarray(prior_sampler(n, seed), dtype=np.float64)
    b, _ = branch_forward(params["branch"], u, arch)
    return np.asarray(b)


def pushforward_log_density(params, arch, b, prior_logpdf: Callable) -> np.ndarray:
    """Change of variables: ``log p_u(branch^{-1}(b)) - log|det d branch / du|``."""
    from idon.networks import branch_forward, branch_inverse

    u = np.asarray(branch_inverse(params["branch"], np.atleast_2d(b), arch))
    _, logdet = branch_forward(params["branch"], u, arch)
    return prior_logpdf(u) - np.asarray(logdet)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.asarray(centers)


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    d = x.shape[1]
    covs = np.empty((resp.shape[1], d, d))
    for m in range(resp.shape[1]):
        diff = x - means[m]
        covs[m] = (resp[:, m, None] * diff).T @ diff / nk[m]
        covs[m] = 0.5 * (covs[m] + covs[m].T) + reg * np.eye(d)
    return weights, means, covs


def _log_resp(x, weights, means, covs):
    logp = np.empty((x.shape[0], len(weights)))
    for m in range(len(weights)):
        logp[:, m] = _mvn_logpdf(x, means[m], cholesky_jitter(covs[m])) + np.log(weights[m])
    norm = logsumexp(logp, axis=1)
    return logp - norm[:, None], float(norm.mean())


def _em_once(x, k, rng, max_iter, tol, reg):
    centers = _kmeans_pp(x, k, rng)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((len(x), k))
    resp[np.arange(len(x)), labels] = 1.0
    resp += 1e-12
    resp /= resp.sum(axis=1, keepdims=True)
    weights, means, covs = _m_step(x, resp, reg)
    prev = -np.inf
    ll = -np.inf
    for it in range(max_iter):
        log_resp, ll = _log_resp(x, weights, means, covs)
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(prev):
            break
        prev = ll
        weights, means, covs = _m_step(x, np.exp(log_resp), reg)
    return ll, weights, means, covs


def fit_gmm(
    samples,
    n_components: int = 2,
    seed: int = 0,
    n_init: int = 5,
    max_iter: int = 500,
    tol: float = 1e-8,
    reg: float = 1e-8,
    min_weight: float = 1e-8,
) -> GaussianMixture:
    """Full-covariance EM from k-means++ starts; best of ``n_init`` restarts.

    Stops when the relative change of the mean log-likelihood drops below
    ``tol``.  ``reg`` is added to every covariance diagonal.  Components whose
    weight falls below ``min_weight`` are pruned with a
    :class:`DegenerateComponentWarning`.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_components:
        raise ValueError("need a (n, D) sample array with n >= n_components")
    if n_components < 1:
        raise ValueError("n_components must be positive")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng([seed, r])
        try:
            result = _em_once(x, n_components, rng, max_iter, tol, reg)
        except NotPositiveDefinite:
            continue
        if best is None or result[0] > best[0]:
            best = result
    if best is None:
        raise DegenerateComponent("every EM restart produced a singular covariance")
    _, weights, means, covs = best
    keep = weights >= min_weight
    if not np.all(keep):
        warnings.warn(f"pruned {np.count_nonzero(~keep)} degenerate mixture component(s)", DegenerateComponentWarning)
        weights, means, covs = weights[keep], means[keep], covs[keep]
    return GaussianMixture(weights / weights.sum(), means, covs)


# --------------------------------------------------------------------------
# conjugate update


@dataclass
class ObservationModel:
    """Noisy observations ``s_hat = Y b + sigma * noise``."""

    s_hat: np.ndarray
    sigma2: float
    y: np.ndarray

    def __post_init__(self):
        self.s_hat = np.asarray(self.s_hat, dtype=np.float64).ravel()
        y = getattr(self.y, "y", self.y)  # accept a TrunkMatrix
        self.y = np.asarray(y, dtype=np.float64)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.y.shape[0] != self.s_hat.shape[0]:
            raise ValueError("Y must have one row per observation")

    def log_likelihood(self, b) -> np.ndarray:
        b = np.atleast_2d(b)
        r = self.s_hat[None, :] - b @ self.y.T
        k = len(self.s_hat)
        return -0.5 * np.sum(r * r, axis=1) / self.sigma2 - 0.5 * k * (LOG_2PI + np.log(self.sigma2))


def posterior_update(prior: GaussianMixture, obs: ObservationModel) -> GaussianMixture:
    """Closed-form mixture posterior for a linear-Gaussian likelihood.

    Per component, with ``D_m = sigma^2 I + Y S_m Y^T`` and gain
    ``G_m = S_m Y^T D_m^{-1}``::

        mu_m = m_m + G_m (s_hat - Y m_m)
        C_m  = (I - G_m Y) S_m (I - G_m Y)^T + sigma^2 G_m G_m^T
        log w~_m = log w_m - 1/2 log|D_m| - 1/2 r_m^T D_m^{-1} r_m  (normalized)

    which equals the information form ``C_m^{-1} = Y^T Y / sigma^2 + S_m^{-1}``
    without inverting ``S_m``.
    """
    y, s_hat, s2 = obs.y, obs.s_hat, obs.sigma2
    if y.shape[1] != prior.dim:
        raise ValueError("Y columns must match the mixture dimension")
    k, d = y.shape
    means = np.empty_like(prior.means)
    covs = np.empty_like(prior.covs)
    logw = np.empty(prior.n_components)
    eye_d = np.eye(d)
    for m in range(prior.n_components):
        sm = prior.covs[m]
        ys = y @ sm  # (K, D)
        dm = s2 * np.eye(k) + ys @ y.T
        low = cholesky_jitter(0.5 * (dm + dm.T))
        r = s_hat - y @ prior.means[m]
        gain = cho_solve(low, ys).T  # S Y^T D^{-1}, (D, K)
        means[m] = prior.means[m] + gain @ r
        a = eye_d - gain @ y
        c = a @ sm @ a.T + s2 * gain @ gain.T
        covs[m] = 0.5 * (c + c.T)
        cholesky_jitter(covs[m])
        z = solve_triangular(low, r, lower=True)
        logw[m] = np.log(prior.weights[m]) - np.sum(np.log(np.diag(low))) - 0.5 * z @ z
    logw -= logw.max()
    w = np.exp(logw)
    return GaussianMixture(w / w.sum(), means, covs)


@dataclass
class PosteriorResult:
    mixture: GaussianMixture
    u_samples: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray
    b_samples: Optional[np.ndarray] = None


def pushback_sample(posterior: GaussianMixture, params, arch, n: int, seed) -> PosteriorResult:
    """Draw ``b`` from the mixture, map through the branch inverse, summarize."""
    from idon.networks import branch_inverse

    if n < 1:
        raise ValueError("n must be positive")
    b, _ = posterior.sample(n, seed)
    u = np.asarray(branch_inverse(params["branch"], b, arch))
    return PosteriorResult(posterior, u, u.mean(axis=0), u.std(axis=0), b)


# --------------------------------------------------------------------------
# reference samplers


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance_rate: float
    log_likelihood: np.ndarray = field(repr=False, default=None)

    def summary(self, burn: int = 0):
        x = self.samples[burn:]
        return x.mean(axis=0), x.std(axis=0)


def batch_means_stderr(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Monte Carlo standard error of the chain mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=np.float64)
    size = len(x) // n_batches
    if size < 1:
        raise ValueError("chain too short for batch means")
    means = x[: size * n_batches].reshape(n_batches, size, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def pcn_mcmc(
    log_likelihood: Callable,
    prior_mean,
    prior_chol,
    beta: float,
    n_samples: int,
    seed,
    u0=None,
    thin: int = 1,
) -> ChainResult:
    """Preconditioned Crank-Nicolson for a Gaussian prior ``N(mean, L L^T)``.

    Proposal ``u' = mean + sqrt(1 - beta^2) (u - mean) + beta L xi``, accepted
    with probability ``min(1, exp(ll(u') - ll(u)))``.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    mean = np.asarray(prior_mean, dtype=np.float64)
    low = np.asarray(prior_chol, dtype=np.float64)
    mean = np.broadcast_to(mean, (low.shape[0],)).copy()
    u = mean + low @ rng.standard_normal(low.shape[0]) if u0 is None else np.asarray(u0, dtype=np.float64).copy()
    ll = log_likelihood(u)
    rho = np.sqrt(1.0 - beta**2)
    out = np.empty((n_samples, len(u)))
    lls = np.empty(n_samples)
    accepted = 0
    total = 0
    for i in range(n_samples):
        for _ in range(thin):
            prop = mean + rho * (u - mean) + beta * (low @ rng.standard_normal(len(u)))
            ll_prop = log_likelihood(prop)
            total += 1
            if np.log(rng.uniform()) < ll_prop - ll:
                u, ll = prop, ll_prop
                accepted += 1
        out[i] = u
        lls[i] = ll
    return ChainResult(out, accepted / total, lls)


def _reflect(x: np.ndarray, lower: float, upper: float) -> np.ndarray:
    width = upper - lower
    y = np.mod(x - lower, 2.0 * width)
    return lower + np.where(y > width, 2.0 * width - y, y)


def rw_metropolis(
    log_posterior: Callable,
    x0,
    step: float,
    n_samples: int,
    seed,
    lower: float = 0.0,
    upper: float = 1.0,
    thin: int = 1,
) -> ChainResult:
    """Gaussian random-walk Metropolis on a box with reflecting proposals.

    Reflection keeps the proposal symmetric, so the plain Metropolis ratio applies.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=np.float64).copy()
    lp = log_posterior(x)
    out = np.empty((n_samples, x.size))
    lps = np.empty(n_samples)
    accepted = 0
    total = 0
    for i in range(n_samples):
        for _ in range(thin):
            prop = _reflect(x + step * rng.standard_normal(x.shape), lower, upper)
            lp_prop = log_posterior(prop)
            total += 1
            if np.log(rng.uniform()) < lp_prop - lp:
                x, lp = prop, lp_prop
                accepted += 1
        out[i] = x
        lps[i] = lp
    return ChainResult(out, accepted / total, lps)
