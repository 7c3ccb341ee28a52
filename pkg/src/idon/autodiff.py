"""Differentiation engine.

Reverse-mode parameter gradients are delegated to JAX's tracer.  Spatial
derivatives of network outputs use second-order truncated Taylor arithmetic
(:class:`Jet2`), written in ``jax.numpy`` so that a reverse pass can run over
it.  The regularized least-squares solve carries its own adjoint rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Any, Callable

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np

from idon.exceptions import NonFiniteGradient
from idon.linalg import normal_cholesky

jax.config.update("jax_enable_x64", True)


# --------------------------------------------------------------------------
# reverse mode


def grad(loss: Callable, at) -> np.ndarray:
    """Gradient of a scalar ``loss`` at the parameter vector ``at``.

    Raises
    ------
    NonFiniteGradient
        If any gradient component is NaN or infinite.
    """
    at = jnp.asarray(at, dtype=jnp.float64)
    g = np.asarray(jax.grad(loss)(at))
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"{np.count_nonzero(~np.isfinite(g))} non-finite components")
    return g


def check_finite_tree(tree) -> None:
    """Raise :class:`NonFiniteGradient` if any leaf of ``tree`` is non-finite."""
    for leaf in jax.tree_util.tree_leaves(tree):
        if not np.all(np.isfinite(np.asarray(leaf))):
            raise NonFiniteGradient("non-finite gradient leaf")


# --------------------------------------------------------------------------
# forward mode, second order


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class Jet2:
    """Value with first and second directional derivatives.

    ``value``, ``d1`` and ``d2`` broadcast against each other; for a scalar
    function ``f`` the propagation rule is
    ``f(x).d2 = f''(x) * x.d1**2 + f'(x) * x.d2``.
    """

    value: Any
    d1: Any
    d2: Any

    def tree_flatten(self):
        return (self.value, self.d1, self.d2), None

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(*children)

    @classmethod
    def seed(cls, x, direction) -> "Jet2":
        x = jnp.asarray(x)
        return cls(x, jnp.broadcast_to(jnp.asarray(direction, x.dtype), x.shape), jnp.zeros_like(x))

    @classmethod
    def constant(cls, c) -> "Jet2":
        c = jnp.asarray(c)
        return cls(c, jnp.zeros_like(c), jnp.zeros_like(c))

    def _lift(self, other) -> "Jet2":
        return other if isinstance(other, Jet2) else Jet2.constant(other)

    def __add__(self, other):
        o = self._lift(other)
        return Jet2(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.d1, -self.d2)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet2):
            return Jet2(self.value * other, self.d1 * other, self.d2 * other)
        return Jet2(
            self.value * other.value,
            self.d1 * other.value + self.value * other.d1,
            self.d2 * other.value + 2.0 * self.d1 * other.d1 + self.value * other.d2,
        )

    __rmul__ = __mul__

    def __matmul__(self, w):
        # right multiplication by a constant matrix (dense layer)
        return Jet2(self.value @ w, self.d1 @ w, self.d2 @ w)

    def __getitem__(self, idx):
        return Jet2(self.value[idx], self.d1[idx], self.d2[idx])

    @property
    def shape(self):
        return jnp.shape(self.value)


def _unary(x, f, df, d2f):
    if not isinstance(x, Jet2):
        return f(x)
    v = f(x.value)
    g1 = df(x.value, v)
    g2 = d2f(x.value, v)
    return Jet2(v, g1 * x.d1, g2 * x.d1 * x.d1 + g1 * x.d2)


def tanh(x):
    return _unary(
        x,
        jnp.tanh,
        lambda z, v: 1.0 - v * v,
        lambda z, v: -2.0 * v * (1.0 - v * v),
    )


def exp(x):
    return _unary(x, jnp.exp, lambda z, v: v, lambda z, v: v)


def sin(x):
    return _unary(x, jnp.sin, lambda z, v: jnp.cos(z), lambda z, v: -v)


def directional_jet2(f: Callable, x, direction) -> Jet2:
    """Evaluate ``f`` on a jet seeded at ``x`` along ``direction``.

    ``f`` must be built from the jet-aware operations in this module (dense
    layers via ``@``, :func:`tanh`, arithmetic).  The returned jet holds the
    output value and its first and second directional derivatives.
    """
    direction = jnp.asarray(direction, dtype=jnp.float64)
    return f(Jet2.seed(jnp.asarray(x, dtype=jnp.float64), direction))


# --------------------------------------------------------------------------
# regularized least squares with an explicit adjoint


def _normal_factor(y, eps):
    d = y.shape[1]
    return jnp.linalg.cholesky(y.T @ y + eps * jnp.eye(d, dtype=y.dtype))


def _adjoint(y, s, b_star, low, upstream):
    lam = jsl.cho_solve((low, True), upstream)
    grad_s = y @ lam
    if s.ndim == 1:
        grad_y = jnp.outer(s, lam) - y @ (jnp.outer(lam, b_star) + jnp.outer(b_star, lam))
    else:
        grad_y = s @ lam.T - y @ (lam @ b_star.T + b_star @ lam.T)
    return grad_y, grad_s


@partial(jax.custom_vjp, nondiff_argnums=(2,))
def lsq_solve(y, s, eps):
    """Differentiable ``(y^T y + eps I)^{-1} y^T s``; ``s`` is ``(K,)`` or ``(K, n)``."""
    low = _normal_factor(y, eps)
    return jsl.cho_solve((low, True), y.T @ s)


def _lsq_fwd(y, s, eps):
    low = _normal_factor(y, eps)
    b = jsl.cho_solve((low, True), y.T @ s)
    return b, (y, s, b, low)


def _lsq_bwd(eps, res, upstream):
    y, s, b, low = res
    return _adjoint(y, s, b, low, upstream)


lsq_solve.defvjp(_lsq_fwd, _lsq_bwd)


def solve_adjoint(y, b_star, upstream, eps: float, s=None):
    """Cotangents of ``b* = (Y^T Y + eps I)^{-1} Y^T s`` for a given upstream.

    With ``lam = (Y^T Y + eps I)^{-1} upstream`` returns
    ``(grad_Y, grad_s) = (s lam^T - Y (lam b*^T + b* lam^T), Y lam)``.
    ``s`` is recovered from ``b*`` via the normal equations when not given
    and ``Y`` is square; otherwise pass it explicitly.
    """
    y = np.asarray(y, dtype=np.float64)
    b_star = np.asarray(b_star, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    low = normal_cholesky(y, eps)
    if s is None:
        normal = y.T @ y + eps * np.eye(y.shape[1])
        if y.shape[0] != y.shape[1]:
            raise ValueError("s is required when Y is not square")
        s = np.linalg.solve(y.T, normal @ b_star)
    s = jnp.asarray(s, dtype=jnp.float64)
    gy, gs = _adjoint(jnp.asarray(y), s, jnp.asarray(b_star), jnp.asarray(low), jnp.asarray(upstream))
    return np.asarray(gy), np.asarray(gs)
