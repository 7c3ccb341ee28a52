"""Dense linear algebra: Cholesky, log-determinants and the ridge solve.

All routines take and return float64 numpy arrays and hold no state.
"""

from __future__ import annotations

import numpy as np

from idon.exceptions import NotPositiveDefinite, SingularSystem

DEFAULT_EPS = 1e-6


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises
    ------
    NotPositiveDefinite
        If ``a`` is not (numerically) symmetric positive definite.
    """
    a = _as_square(a)
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > 1e-10 * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(low) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return low


def cholesky_jitter(a, rel: float = 1e-10) -> np.ndarray:
    """Cholesky with a single retry after adding ``rel * trace / D`` to the diagonal."""
    a = _as_square(a)
    try:
        return cholesky(a)
    except NotPositiveDefinite:
        jitter = rel * max(np.trace(a) / a.shape[0], np.finfo(float).tiny)
        return cholesky(a + jitter * np.eye(a.shape[0]))


def logdet_spd(a) -> float:
    """``log det(a)`` for SPD ``a`` via ``2 * sum(log(diag(L)))``."""
    low = cholesky(a)
    return float(2.0 * np.sum(np.log(np.diag(low))))


def cho_solve(low: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = rhs`` given the lower Cholesky factor."""
    from scipy.linalg import solve_triangular

    tmp = solve_triangular(low, rhs, lower=True)
    return solve_triangular(low.T, tmp, lower=False)


def solve_regularized_lsq(y, s, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Minimize ``||s - y b||^2 + eps ||b||^2`` over ``b``.

    Solved through the normal equations ``(y^T y + eps I) b = y^T s`` with a
    Cholesky factorization; ``D`` is small in every use of this function.
    ``s`` may also be a ``(K, n)`` matrix of right-hand sides.

    Raises
    ------
    SingularSystem
        If ``eps == 0`` and ``y`` does not have full column rank.
    """
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("y must be a K x D matrix")
    if s.shape[0] != y.shape[0]:
        raise ValueError(f"s has {s.shape[0]} rows, y has {y.shape[0]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return cho_solve(normal_cholesky(y, eps), y.T @ s)


def normal_cholesky(y: np.ndarray, eps: float) -> np.ndarray:
    """Cholesky factor of ``y^T y + eps I``.

    Raises
    ------
    SingularSystem
        If the matrix is not positive definite (rank-deficient ``y`` with ``eps == 0``).
    """
    d = y.shape[1]
    if eps == 0 and np.linalg.matrix_rank(y) < d:
        raise SingularSystem("y^T y is rank deficient and eps == 0")
    try:
        return cholesky(y.T @ y + eps * np.eye(d))
    except NotPositiveDefinite as exc:
        raise SingularSystem(str(exc)) from None
