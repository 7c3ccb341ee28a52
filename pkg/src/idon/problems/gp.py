"""Gaussian-process input sampling with the squared-exponential kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from idon.exceptions import NotPositiveDefinite
from idon.linalg import cholesky

JITTER = 1e-10


@dataclass(frozen=True)
class GpSpec:
    """Zero-mean (by default), unit-variance squared-exponential process."""

    lengthscale: float
    variance: float = 1.0
    mean: float = 0.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.variance > 0):
            raise ValueError("lengthscale and variance must be positive")

    def kernel(self, a, b) -> np.ndarray:
        """``variance * exp(-|a - b|^2 / (2 l^2))`` between two point sets."""
        a = _points(a)
        b = _points(b)
        sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        return self.variance * np.exp(-0.5 * sq / self.lengthscale**2)


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def gp_cholesky(spec: GpSpec, grid) -> np.ndarray:
    """Cholesky factor of the kernel matrix plus jitter (one 100x retry)."""
    cov = spec.kernel(grid, grid)
    n = cov.shape[0]
    for jitter in (JITTER, 100 * JITTER):
        try:
            return cholesky(cov + jitter * spec.variance * np.eye(n))
        except NotPositiveDefinite:
            continue
    raise NotPositiveDefinite("GP covariance not positive definite after jitter retry")


def sample_gp(spec: GpSpec, grid, n: int, seed: int, chol=None) -> np.ndarray:
    """``n`` draws ``mean + L z`` on ``grid``; sample ``i`` uses stream ``(seed, i)``."""
    low = gp_cholesky(spec, grid) if chol is None else chol
    out = np.empty((n, low.shape[0]))
    for i in range(n):
        z = np.random.default_rng([seed, i]).standard_normal(low.shape[0])
        out[i] = spec.mean + low @ z
    return out


def sample_gp_tensor(spec: GpSpec, axis_x, axis_y, n: int, seed: int) -> np.ndarray:
    """Draws on the tensor grid ``axis_x x axis_y`` using the kernel's separability.

    Returns an array of shape ``(n, len(axis_x), len(axis_y))``; the covariance
    equals that of :func:`sample_gp` on the flattened grid up to jitter.
    """
    unit = GpSpec(spec.lengthscale)
    lx = gp_cholesky(unit, axis_x)
    ly = gp_cholesky(unit, axis_y)
    scale = np.sqrt(spec.variance)
    out = np.empty((n, lx.shape[0], ly.shape[0]))
    for i in range(n):
        z = np.random.default_rng([seed, i]).standard_normal((lx.shape[0], ly.shape[0]))
        out[i] = spec.mean + scale * (lx @ z @ ly.T)
    return out
