"""Trunk matrix assembly and the forward / inverse maps of the invertible DeepONet."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import jax.numpy as jnp
import numpy as np

from idon import autodiff as ad
from idon.networks import Architecture, branch_forward, branch_inverse, trunk_eval


@dataclass(frozen=True)
class TrunkMatrix:
    """``y[k, j] = t_j(coords[k])`` (times the hard-constraint factor, if any)."""

    coords: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.y.ndim != 2 or self.y.shape[0] != self.coords.shape[0] or self.y.shape[0] < 1:
            raise ValueError("trunk matrix must have one row per coordinate")

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "TrunkMatrix":
        idx = np.asarray(idx)
        return TrunkMatrix(self.coords[idx], self.y[idx])


def _as_coords(coords, coord_dim: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim == 1 and coord_dim == 1:
        c = c[:, None]
    elif c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2 or c.shape[1] != coord_dim:
        raise ValueError(f"coordinates must have shape (K, {coord_dim}), got {np.shape(coords)}")
    if c.shape[0] == 0:
        raise ValueError("at least one coordinate is required")
    return c


def trunk_rows(trunk, coords, factor: Optional[Callable] = None):
    """Trunk outputs at ``coords`` (jax array), optionally times ``factor(coords)``."""
    t = trunk_eval(trunk, coords)
    if factor is not None:
        t = t * factor(coords)[..., None]
    return t


def assemble_trunk_matrix(trunk, coords, coord_dim: int = 1, factor: Optional[Callable] = None) -> TrunkMatrix:
    c = _as_coords(coords, coord_dim)
    return TrunkMatrix(c, np.asarray(trunk_rows(trunk, jnp.asarray(c), factor)))


def contract(y, b):
    """``s_k = sum_j y[k, j] b_j`` for one or many ``b`` (rows)."""
    return jnp.asarray(b) @ jnp.asarray(y).T


def forward_map(params, arch: Architecture, u, ym: TrunkMatrix) -> np.ndarray:
    """``s = Y b(u)`` for ``u`` of shape ``(D,)`` or ``(n, D)``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != arch.dim:
        raise ValueError(f"u must have {arch.dim} entries, got {u.shape[-1]}")
    b, _ = branch_forward(params["branch"], u, arch)
    return np.asarray(contract(ym.y, b))


def inverse_map(params, arch: Architecture, s, ym: TrunkMatrix, eps: float) -> np.ndarray:
    """Regularized least squares for ``b`` followed by the analytic branch inverse."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != ym.n_obs:
        raise ValueError(f"s must have {ym.n_obs} entries, got {s.shape[-1]}")
    from idon.linalg import solve_regularized_lsq

    b = solve_regularized_lsq(ym.y, s.T, eps).T
    return np.asarray(branch_inverse(params["branch"], b, arch))


def predict_at(params, arch: Architecture, u, xi, factor: Optional[Callable] = None) -> np.ndarray:
    """``G(u)(xi) = sum_j b_j(u) t_j(xi)`` at one or more coordinates."""
    ym = assemble_trunk_matrix(params["trunk"], xi, arch.coord_dim, factor)
    return forward_map(params, arch, u, ym)


def trunk_jets(trunk, coords, direction, factor: Optional[Callable] = None) -> ad.Jet2:
    """Jet of every trunk output along ``direction`` at each coordinate.

    ``factor`` (hard boundary constraint) must accept coordinate jets as well as
    arrays; it multiplies every trunk output.
    """
    seed = ad.Jet2.seed(coords, direction)
    t = trunk_eval(trunk, seed)
    if factor is not None:
        f = factor(seed)
        t = t * ad.Jet2(f.value[..., None], f.d1[..., None], f.d2[..., None])
    return t
