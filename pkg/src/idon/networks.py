"""MLPs, RealNVP coupling blocks, the invertible branch net and the trunk net.

Parameters are plain pytrees (nested lists of ``[W, b]`` pairs) so they can be
differentiated, serialized and updated without wrapper classes.  ``W`` has
shape ``(fan_in, fan_out)`` and layers act on the last axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import jax.numpy as jnp
import numpy as np

from idon import autodiff as ad

DEFAULT_S_MAX = 5.0


@dataclass(frozen=True)
class Architecture:
    """Static description of an invertible DeepONet.

    Parameters
    ----------
    dim : int
        ``D = F = Q``, shared by the branch input, branch output and trunk output.
    coord_dim : int
        Number of spatio-temporal coordinates fed to the trunk net.
    n_blocks : int
        Number of coupling blocks in the branch net (at least 2).
    coupling_hidden : tuple of int
        Hidden widths of each ``k`` and ``r`` subnetwork.  Empty means "two
        hidden layers of width ``dim``".
    trunk_hidden : tuple of int
        Hidden widths of the trunk MLP.
    split : int or None
        Coupling split index ``d``; ``None`` means ``dim // 2``.
    s_max : float
        Bound of the soft clamp ``s_max * tanh(k / s_max)`` applied to the log
        scales.  ``inf`` disables the clamp.
    """

    dim: int
    coord_dim: int = 1
    n_blocks: int = 2
    coupling_hidden: tuple = ()
    trunk_hidden: tuple = (100, 100, 100, 100)
    split: int | None = None
    s_max: float = DEFAULT_S_MAX

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if self.n_blocks < 2:
            raise ValueError("the branch net needs at least two coupling blocks")
        if not 1 <= self.d < self.dim:
            raise ValueError(f"split must satisfy 1 <= d < {self.dim}")
        if self.coord_dim < 1:
            raise ValueError("coord_dim must be positive")
        if not self.s_max > 0:
            raise ValueError("s_max must be positive")

    @property
    def d(self) -> int:
        return self.dim // 2 if self.split is None else int(self.split)

    @property
    def coupling_widths(self) -> tuple:
        hidden = tuple(self.coupling_hidden) or (self.dim, self.dim)
        return (self.d, *hidden, self.dim - self.d)

    @property
    def trunk_widths(self) -> tuple:
        return (self.coord_dim, *self.trunk_hidden, self.dim)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["coupling_hidden"] = list(self.coupling_hidden)
        out["trunk_hidden"] = list(self.trunk_hidden)
        out["s_max"] = None if np.isinf(self.s_max) else float(self.s_max)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Architecture":
        data = dict(data)
        data["coupling_hidden"] = tuple(data.get("coupling_hidden", ()))
        data["trunk_hidden"] = tuple(data.get("trunk_hidden", ()))
        if data.get("s_max") is None:
            data["s_max"] = float("inf")
        return cls(**data)


# --------------------------------------------------------------------------
# MLP


def mlp_apply(layers, x):
    """Tanh hidden layers, linear output.  ``x`` may be an array or a Jet2."""
    n = len(layers)
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < n - 1:
            x = ad.tanh(x)
    return x


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, widths, zero_last: bool = False) -> list:
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"invalid layer widths {widths}")
    layers = []
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        w = _glorot(rng, fi, fo)
        if zero_last and i == len(widths) - 2:
            w = np.zeros_like(w)
        layers.append([jnp.asarray(w), jnp.zeros(fo)])
    return layers


def init_params(arch: Architecture, seed: int) -> dict:
    """Glorot-uniform weights, zero biases, zero final layer in every ``k`` net."""
    rng = np.random.default_rng(seed)
    branch = []
    for _ in range(arch.n_blocks):
        k_net = init_mlp(rng, arch.coupling_widths, zero_last=True)
        r_net = init_mlp(rng, arch.coupling_widths)
        branch.append({"k": k_net, "r": r_net})
    trunk = init_mlp(rng, arch.trunk_widths)
    return {"branch": branch, "trunk": trunk}


def n_parameters(params) -> int:
    import jax

    return sum(int(np.size(leaf)) for leaf in jax.tree_util.tree_leaves(params))


# --------------------------------------------------------------------------
# coupling blocks


def _log_scale(block, x1, s_max):
    k = mlp_apply(block["k"], x1)
    if np.isinf(s_max):
        return k
    return s_max * jnp.tanh(k / s_max)


def coupling_forward(block, x, d: int, s_max: float = DEFAULT_S_MAX):
    """Affine coupling ``y2 = x2 * exp(k(x1)) + r(x1)``; returns ``(y, logdet)``."""
    x1, x2 = x[..., :d], x[..., d:]
    k = _log_scale(block, x1, s_max)
    y2 = x2 * jnp.exp(k) + mlp_apply(block["r"], x1)
    return jnp.concatenate([x1, y2], axis=-1), jnp.sum(k, axis=-1)


def coupling_inverse(block, y, d: int, s_max: float = DEFAULT_S_MAX):
    """Exact inverse of :func:`coupling_forward`."""
    y1, y2 = y[..., :d], y[..., d:]
    k = _log_scale(block, y1, s_max)
    x2 = (y2 - mlp_apply(block["r"], y1)) * jnp.exp(-k)
    return jnp.concatenate([y1, x2], axis=-1)


def branch_forward(branch, u, arch: Architecture):
    """Blocks interleaved with full reversals.  Returns ``(b, logdet)``."""
    x = jnp.asarray(u)
    logdet = jnp.zeros(x.shape[:-1])
    for block in branch:
        x, ld = coupling_forward(block, x, arch.d, arch.s_max)
        x = x[..., ::-1]
        logdet = logdet + ld
    return x, logdet


def branch_inverse(branch, b, arch: Architecture):
    x = jnp.asarray(b)
    for block in reversed(branch):
        x = coupling_inverse(block, x[..., ::-1], arch.d, arch.s_max)
    return x


def trunk_eval(trunk, xi):
    """Trunk basis ``[t_1(xi), ..., t_Q(xi)]``; ``xi`` has shape ``(..., coord_dim)``.

    Coordinates in the unit domain are first mapped affinely to ``[-1, 1]``.
    With zero initial biases this keeps the initial basis functions from all
    vanishing at the origin, which otherwise leaves them nearly collinear.
    """
    return mlp_apply(trunk, xi * 2.0 - 1.0)
