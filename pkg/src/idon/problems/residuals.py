"""PDE and boundary residual operators for each benchmark.

A residual is evaluated from a dictionary of surrogate derivatives at a set
of points, all shaped ``(batch, P)``:

``s``            prediction
``d0``, ``dd0``  first / second derivative along coordinate 0
``d1``, ``dd1``  first / second derivative along coordinate 1

and a dictionary of input-field data at the same points (``u`` and, for
Darcy, ``ux``/``uy``).  :meth:`ResidualOperator.prepare` builds the latter
from stored inputs.  The Darcy residual is the PDE divided by the
permeability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from idon.problems.features import eval_feature_field
from idon.problems.spec import ProblemSpec


def interp_1d_weights(grid: np.ndarray, x: np.ndarray):
    """Indices and weights for linear interpolation of values on ``grid`` at ``x``."""
    idx = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    w = (x - grid[idx]) / (grid[idx + 1] - grid[idx])
    return idx, w


def interp_1d(values: np.ndarray, grid: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Linear interpolation along the last axis of ``values``."""
    idx, w = interp_1d_weights(grid, np.asarray(x, dtype=np.float64))
    return values[..., idx] * (1.0 - w) + values[..., idx + 1] * w


def interp_bilinear(values: np.ndarray, grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``values[..., i, j]`` on ``grid x grid`` at ``pts (P, 2)``."""
    i, wx = interp_1d_weights(grid, pts[:, 0])
    j, wy = interp_1d_weights(grid, pts[:, 1])
    return (
        values[..., i, j] * (1 - wx) * (1 - wy)
        + values[..., i + 1, j] * wx * (1 - wy)
        + values[..., i, j + 1] * (1 - wx) * wy
        + values[..., i + 1, j + 1] * wx * wy
    )


@dataclass(frozen=True)
class ResidualOperator:
    """PDE residual ``N(u, s)`` and boundary residual ``B(u, s)`` of one problem."""

    problem: ProblemSpec

    @property
    def tag(self) -> str:
        return self.problem.tag

    @property
    def directions(self) -> tuple:
        """Coordinate directions along which jets are needed."""
        return (0,) if self.problem.coord_dim == 1 else (0, 1)

    @property
    def has_boundary_loss(self) -> bool:
        return self.tag in ("antiderivative", "reaction_diffusion")

    def prepare(self, inputs: np.ndarray, fine_inputs, points: np.ndarray) -> dict:
        """Input-field data at ``points`` for every sample row."""
        p = self.problem
        points = np.asarray(points, dtype=np.float64)
        if self.tag in ("antiderivative", "reaction_diffusion"):
            if fine_inputs is None:
                raise ValueError(f"{self.tag} residuals need the stored fine input fields")
            return {"u": interp_1d(np.asarray(fine_inputs), p.fine_grid(), points[:, 0])}
        if self.tag == "darcy_features":
            u, grad = eval_feature_field(inputs, points)
            return {"u": u, "ux": grad[..., 0], "uy": grad[..., 1]}
        if fine_inputs is None:
            raise ValueError("darcy_cg residuals need the stored fine permeability fields")
        grid = p.fine_grid()
        n = len(grid)
        field = np.asarray(fine_inputs).reshape(-1, n, n)
        gx, gy = np.gradient(field, grid, grid, axis=(1, 2))
        return {
            "u": interp_bilinear(field, grid, points),
            "ux": interp_bilinear(gx, grid, points),
            "uy": interp_bilinear(gy, grid, points),
        }

    def residual(self, d: dict, data: dict):
        p = self.problem
        if self.tag == "antiderivative":
            return d["d0"] - data["u"]
        if self.tag == "reaction_diffusion":
            return d["d1"] - p.diffusion * d["dd0"] - p.reaction * d["s"] * d["s"] - data["u"]
        # div(u grad s) - f divided by u > 0; keeps the loss scale independent
        # of the permeability range, which spans several decades
        u = data["u"]
        return d["dd0"] + d["dd1"] + (data["ux"] * d["d0"] + data["uy"] * d["d1"] - p.source) / u

    def boundary(self, d: dict, data: dict | None = None):
        """Zero Dirichlet / initial values: the residual is the prediction itself."""
        return d["s"]


def residual_operator(problem: ProblemSpec) -> ResidualOperator:
    return ResidualOperator(problem)
