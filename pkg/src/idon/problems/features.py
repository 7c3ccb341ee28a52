"""Log-permeability feature expansion with 64 trigonometric products.

Coefficient ``c[(f1 - 1) * 16 + (f2 - 1) * 4 + (q - 1)]`` multiplies family
``q`` at frequencies ``(f1, f2)``:

    q = 1: sin(f1 x1) cos(f2 x2)      q = 2: sin(f1 x1) sin(f2 x2)
    q = 3: cos(f1 x1) sin(f2 x2)      q = 4: cos(f1 x1) cos(f2 x2)

The arguments are ``f x`` without a factor of pi.
"""

from __future__ import annotations

import numpy as np

N_FREQ = 4
N_FEATURES = 64


def feature_index(f1: int, f2: int, q: int) -> int:
    return (f1 - 1) * 16 + (f2 - 1) * 4 + (q - 1)


def feature_matrix(xi):
    """Feature values and their gradients at points ``xi`` of shape ``(P, 2)``.

    Returns
    -------
    phi : (P, 64)
    dphi : (P, 64, 2)
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    f = np.arange(1, N_FREQ + 1, dtype=np.float64)
    a = f[None, :] * xi[:, 0:1]  # (P, 4) f1 x1
    b = f[None, :] * xi[:, 1:2]  # (P, 4) f2 x2
    sa, ca, sb, cb = np.sin(a), np.cos(a), np.sin(b), np.cos(b)
    fa = f[None, :]
    # values / d/dx1 / d/dx2 of the x1 and x2 factors per family
    x1_val = [sa, sa, ca, ca]
    x1_der = [fa * ca, fa * ca, -fa * sa, -fa * sa]
    x2_val = [cb, sb, sb, cb]
    x2_der = [-fa * sb, fa * cb, fa * cb, -fa * sb]
    p = xi.shape[0]
    phi = np.empty((p, N_FREQ, N_FREQ, 4))
    dphi = np.empty((p, N_FREQ, N_FREQ, 4, 2))
    for q in range(4):
        phi[..., q] = x1_val[q][:, :, None] * x2_val[q][:, None, :]
        dphi[..., q, 0] = x1_der[q][:, :, None] * x2_val[q][:, None, :]
        dphi[..., q, 1] = x1_val[q][:, :, None] * x2_der[q][:, None, :]
    return phi.reshape(p, N_FEATURES), dphi.reshape(p, N_FEATURES, 2)


def eval_feature_field(c, xi):
    """Permeability ``u = exp(phi(xi) . c)`` and its gradient.

    ``c`` may be ``(64,)`` or a batch ``(n, 64)``; ``xi`` is ``(P, 2)`` or ``(2,)``.
    Returns ``u`` with shape ``(..., P)`` and ``grad`` with shape ``(..., P, 2)``.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} coefficients")
    phi, dphi = feature_matrix(xi)
    log_u = c @ phi.T
    u = np.exp(log_u)
    grad = u[..., None] * np.einsum("...f,pfk->...pk", c, dphi)
    return u, grad


def field_on_grid(c, n: int) -> np.ndarray:
    """Nodal permeability on the ``n x n`` grid of the unit square (axis 0 is x1)."""
    g = np.linspace(0.0, 1.0, n)
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    u, _ = eval_feature_field(c, pts)
    return u.reshape(*np.shape(c)[:-1], n, n)
