"""Benchmark problem definitions: constants, grids and coordinate layouts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from idon.problems.features import N_FEATURES
from idon.problems.gp import GpSpec
from idon.problems.solvers import DARCY_SOURCE, RD_DIFFUSION, RD_REACTION

PROBLEMS = ("antiderivative", "reaction_diffusion", "darcy_features", "darcy_cg")


@dataclass(frozen=True)
class ProblemSpec:
    """One benchmark.  Defaults reproduce the full-scale dimensions.

    ``dim`` is the branch input size, ``n_obs`` the number of output
    coordinates, ``n_res``/``n_bc`` the numbers of collocation and boundary
    points.  ``fine_factor`` refines the 1-D sensor grid for the stored input
    fields; ``solver_n`` is the Darcy node count per side; ``rd_nx``/``rd_nt``
    the reaction-diffusion grid.
    """

    tag: str
    dim: int
    n_obs: int
    n_res: int
    n_bc: int = 0
    lengthscale: float = 0.2
    fine_factor: int = 10
    rd_nx: int = 100
    rd_nt: int = 100
    solver_n: int = 129
    coarse: int = 8
    diffusion: float = RD_DIFFUSION
    reaction: float = RD_REACTION
    source: float = DARCY_SOURCE

    def __post_init__(self):
        if self.tag not in PROBLEMS:
            raise ValueError(f"unknown problem {self.tag!r}; expected one of {PROBLEMS}")
        if self.tag == "darcy_features" and self.dim != N_FEATURES:
            raise ValueError("darcy_features has exactly 64 inputs")
        if self.tag == "darcy_cg" and self.dim != self.coarse**2:
            raise ValueError("darcy_cg input size must equal coarse**2")
        if self.is_darcy and int(round(np.sqrt(self.n_obs))) ** 2 != self.n_obs:
            raise ValueError("Darcy observations lie on a square grid; n_obs must be a square")

    # -- layout ---------------------------------------------------------------

    @property
    def is_darcy(self) -> bool:
        return self.tag.startswith("darcy")

    @property
    def coord_dim(self) -> int:
        return 1 if self.tag == "antiderivative" else 2

    @property
    def coord_names(self) -> tuple:
        return {"antiderivative": ("x",), "reaction_diffusion": ("x", "t")}.get(self.tag, ("x", "y"))

    @property
    def hard_constraint(self) -> bool:
        return self.is_darcy

    @property
    def gp(self) -> GpSpec:
        return GpSpec(self.lengthscale)

    def sensors(self) -> np.ndarray:
        """Branch input locations ``(D, coord_dim)``; feature indices for darcy_features."""
        if self.tag in ("antiderivative", "reaction_diffusion"):
            return np.linspace(0.0, 1.0, self.dim)[:, None]
        if self.tag == "darcy_cg":
            g = (np.arange(self.coarse) + 0.5) / self.coarse
            return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        idx = [(f1, f2, q) for f1 in range(1, 5) for f2 in range(1, 5) for q in range(1, 5)]
        return np.asarray(idx, dtype=np.float64)

    def fine_grid(self) -> np.ndarray | None:
        """Grid on which input fields are stored for residual evaluation."""
        if self.tag in ("antiderivative", "reaction_diffusion"):
            return np.linspace(0.0, 1.0, (self.dim - 1) * self.fine_factor + 1)
        if self.tag == "darcy_cg":
            return np.linspace(0.0, 1.0, self.solver_n)
        return None

    def observation_coords(self, rng: np.random.Generator) -> np.ndarray:
        """Shared output coordinates: random for 1-D / space-time, regular for Darcy."""
        if self.is_darcy:
            m = int(round(np.sqrt(self.n_obs)))
            g = np.linspace(0.0, 1.0, m + 2)[1:-1]
            return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        return rng.uniform(0.0, 1.0, size=(self.n_obs, self.coord_dim))

    def collocation_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(0.0, 1.0, size=(n, self.coord_dim))

    def boundary_points(self, n: int) -> np.ndarray:
        """Evenly spaced points on the boundary / initial sets."""
        if n <= 0:
            return np.zeros((0, self.coord_dim))
        if self.tag == "antiderivative":
            return np.zeros((1, 1))
        if self.tag == "reaction_diffusion":
            per = -(-n // 3)
            g = np.linspace(0.0, 1.0, per)
            left = np.stack([np.zeros(per), g], axis=1)
            right = np.stack([np.ones(per), g], axis=1)
            init = np.stack([g, np.zeros(per)], axis=1)
            return np.concatenate([left, right, init])[:n]
        per = -(-n // 4)
        g = np.linspace(0.0, 1.0, per)
        z, o = np.zeros(per), np.ones(per)
        edges = [np.stack(e, axis=1) for e in ((z, g), (o, g), (g, z), (g, o))]
        return np.concatenate(edges)[:n]

    def factor(self, xi):
        """Hard-constraint multiplier ``x1 (1 - x1) x2 (1 - x2)`` (arrays or jets)."""
        x1, x2 = xi[..., 0], xi[..., 1]
        return x1 * (1.0 - x1) * x2 * (1.0 - x2)

    def factor_or_none(self):
        return self.factor if self.hard_constraint else None

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown problem fields: {sorted(unknown)}")
        return cls(**data)


_DEFAULTS = {
    "antiderivative": dict(dim=100, n_obs=200, n_res=200, n_bc=0, lengthscale=0.2),
    "reaction_diffusion": dict(dim=100, n_obs=200, n_res=200, n_bc=300, lengthscale=0.2),
    "darcy_features": dict(dim=64, n_obs=3844, n_res=3844, n_bc=0),
    "darcy_cg": dict(dim=64, n_obs=3844, n_res=3844, n_bc=0, lengthscale=0.1),
}


def problem_spec(tag: str, **overrides) -> ProblemSpec:
    """Full-scale defaults for ``tag`` with keyword overrides."""
    if tag not in _DEFAULTS:
        raise ValueError(f"unknown problem {tag!r}; expected one of {PROBLEMS}")
    return ProblemSpec(tag=tag, **{**_DEFAULTS[tag], **overrides})


def with_overrides(spec: ProblemSpec, **overrides) -> ProblemSpec:
    return replace(spec, **overrides)
