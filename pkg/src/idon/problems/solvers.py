"""Reference solvers: trapezoid antiderivative, implicit reaction-diffusion, Darcy."""

from __future__ import annotations

from typing import Callable, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from idon.exceptions import NotPositiveDefinite, SolverDiverged

RD_DIFFUSION = 0.01
RD_REACTION = 0.01
DARCY_SOURCE = 10.0
DIVERGENCE_BOUND = 1e6


def solve_antiderivative(u, grid) -> np.ndarray:
    """``s(xi) = int_0^xi u`` by the cumulative trapezoid rule, ``s(grid[0]) = 0``."""
    u = np.asarray(u, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    return cumulative_trapezoid(u, grid, axis=-1, initial=0.0)


def _tridiag_banded(n: int, diag: float, off: float) -> np.ndarray:
    # upper banded storage for cholesky_banded
    ab = np.empty((2, n))
    ab[0, :] = off
    ab[1, :] = diag
    return ab


def solve_reaction_diffusion(
    u: Union[np.ndarray, Callable],
    nx: int = 100,
    nt: int = 100,
    u_grid=None,
    diffusion: float = RD_DIFFUSION,
    reaction: float = RD_REACTION,
    t_final: float = 1.0,
):
    """Backward Euler / central differences for ``s_t = D s_xx + k s^2 + u``.

    The quadratic term is lagged one step.  Homogeneous Dirichlet boundaries
    and zero initial state.

    Parameters
    ----------
    u : array or callable
        Source values on ``u_grid`` (default: the solver's ``nx`` nodes), or a
        callable ``u(x, t)`` for time-dependent forcing.

    Returns
    -------
    x : (nx,) array
    t : (nt,) array
    s : (nt, nx) array
    """
    if nx < 3 or nt < 3:
        raise ValueError("nx and nt must be at least 3")
    x = np.linspace(0.0, 1.0, nx)
    t = np.linspace(0.0, t_final, nt)
    dx = x[1] - x[0]
    dt = t[1] - t[0]

    if callable(u):
        forcing = lambda tn: np.asarray(u(x[1:-1], tn), dtype=np.float64)  # noqa: E731
    else:
        u = np.asarray(u, dtype=np.float64)
        if u_grid is None:
            if u.shape[-1] != nx:
                raise ValueError("u must be given on the solver grid or with u_grid")
            vals = u[1:-1]
        else:
            vals = np.interp(x[1:-1], np.asarray(u_grid, dtype=np.float64), u)
        forcing = lambda tn: vals  # noqa: E731

    m = nx - 2
    r = diffusion * dt / dx**2
    factor = cholesky_banded(_tridiag_banded(m, 1.0 + 2.0 * r, -r))
    s = np.zeros((nt, nx))
    cur = np.zeros(m)
    for n in range(1, nt):
        rhs = cur + dt * (reaction * cur * cur + forcing(t[n]))
        cur = cho_solve_banded((factor, False), rhs)
        if not np.all(np.abs(cur) <= DIVERGENCE_BOUND):
            raise SolverDiverged(f"|s| exceeded {DIVERGENCE_BOUND:g} at step {n}")
        s[n, 1:-1] = cur
    return x, t, s


def darcy_matrix_banded(u: np.ndarray) -> np.ndarray:
    """Upper banded storage of the SPD matrix ``-h^2 div(u grad .)`` on interior nodes.

    Five-point finite-volume stencil with arithmetic-mean face coefficients.
    """
    n = u.shape[0]
    m = n - 2
    east = 0.5 * (u[1:-1, 1:-1] + u[2:, 1:-1])  # face (i+1/2, j)
    west = 0.5 * (u[1:-1, 1:-1] + u[:-2, 1:-1])
    north = 0.5 * (u[1:-1, 1:-1] + u[1:-1, 2:])  # face (i, j+1/2)
    south = 0.5 * (u[1:-1, 1:-1] + u[1:-1, :-2])
    # unknown (i, j) -> i * m + j; j-neighbours are adjacent, i-neighbours m apart
    diag = (east + west + north + south).ravel()
    ab = np.zeros((m + 1, m * m))
    ab[m, :] = diag
    off_j = -north.copy()
    off_j[:, -1] = 0.0
    ab[m - 1, 1:] = off_j.ravel()[:-1]
    ab[0, m:] = -east[:-1, :].ravel()
    return ab


def solve_darcy(u, rhs: float = DARCY_SOURCE) -> np.ndarray:
    """Solve ``div(u grad s) = rhs`` on the unit square with ``s = 0`` on the boundary.

    ``u`` holds nodal permeabilities on an ``n x n`` grid (axis 0 is ``x1``).
    Returns ``s`` on the same grid.

    Raises
    ------
    NotPositiveDefinite
        If ``u`` is not strictly positive or the factorization fails.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1] or u.shape[0] < 3:
        raise ValueError("u must be an n x n nodal field with n >= 3")
    if not np.all(u > 0):
        raise NotPositiveDefinite("permeability must be strictly positive")
    n = u.shape[0]
    h = 1.0 / (n - 1)
    m = n - 2
    ab = darcy_matrix_banded(u)
    try:
        factor = cholesky_banded(ab)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    sol = cho_solve_banded((factor, False), np.full(m * m, -rhs * h * h))
    s = np.zeros((n, n))
    s[1:-1, 1:-1] = sol.reshape(m, m)
    return s
