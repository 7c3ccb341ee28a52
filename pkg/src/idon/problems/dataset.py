"""Dataset generation and the ``IDON1`` binary container.

Container layout::

    b"IDON1\\n"
    uint64 little-endian: byte length L of the metadata document
    L bytes: UTF-8 JSON metadata (sorted keys), including an ``arrays``
             manifest ``[{"name": ..., "shape": [...]}, ...]``
    the manifest arrays as little-endian float64, C order, concatenated
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from idon.problems.features import field_on_grid
from idon.problems.gp import gp_cholesky, sample_gp_tensor
from idon.problems.residuals import interp_1d, interp_bilinear
from idon.problems.solvers import solve_antiderivative, solve_darcy, solve_reaction_diffusion
from idon.problems.spec import ProblemSpec
from idon.exceptions import DatasetFormatError

MAGIC = b"IDON1\n"
FORMAT_VERSION = 1
_COORD_STREAM = 0xC00D
_SAMPLE_STREAM = 1


def _rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(n, -1) if n or a.ndim != 2 else a


@dataclass
class OperatorDataset:
    """Inputs, optional outputs and the grids they live on.

    ``outputs`` rows are NaN for unlabeled samples.
    """

    problem: ProblemSpec
    inputs: np.ndarray
    coords: np.ndarray
    outputs: Optional[np.ndarray] = None
    fine_inputs: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64).reshape(-1, self.problem.dim)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, self.problem.coord_dim)
        n = self.inputs.shape[0]
        if self.outputs is not None:
            self.outputs = _rows(self.outputs, n)
            if self.outputs.shape[1] != self.coords.shape[0]:
                raise ValueError("outputs must have one column per coordinate")
        if self.fine_inputs is not None:
            self.fine_inputs = _rows(self.fine_inputs, n)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def sensors(self) -> np.ndarray:
        return self.problem.sensors()

    @property
    def labeled_mask(self) -> np.ndarray:
        if self.outputs is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.any(np.isnan(self.outputs), axis=1)

    def subset(self, idx) -> "OperatorDataset":
        idx = np.asarray(idx)
        return OperatorDataset(
            self.problem,
            self.inputs[idx],
            self.coords,
            None if self.outputs is None else self.outputs[idx],
            None if self.fine_inputs is None else self.fine_inputs[idx],
            dict(self.metadata),
        )

    # -- io -------------------------------------------------------------------

    def _arrays(self) -> list:
        arrays = [("sensors", self.sensors), ("coords", self.coords), ("inputs", self.inputs)]
        if self.outputs is not None:
            arrays.append(("outputs", self.outputs))
        if self.fine_inputs is not None:
            arrays.append(("fine_inputs", self.fine_inputs))
        return arrays

    def to_bytes(self) -> bytes:
        arrays = self._arrays()
        meta = dict(self.metadata)
        meta["format_version"] = FORMAT_VERSION
        meta["problem"] = self.problem.to_dict()
        meta["arrays"] = [{"name": name, "shape": list(a.shape)} for name, a in arrays]
        doc = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<Q", len(doc)), doc]
        parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "OperatorDataset":
        if raw[: len(MAGIC)] != MAGIC:
            raise DatasetFormatError("bad magic; not an IDON1 container")
        pos = len(MAGIC)
        if len(raw) < pos + 8:
            raise DatasetFormatError("truncated header")
        (n_meta,) = struct.unpack("<Q", raw[pos : pos + 8])
        pos += 8
        if len(raw) < pos + n_meta:
            raise DatasetFormatError("truncated metadata")
        try:
            meta = json.loads(raw[pos : pos + n_meta].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"unreadable metadata: {exc}") from None
        pos += n_meta
        manifest = meta.pop("arrays", None)
        if not isinstance(manifest, list):
            raise DatasetFormatError("metadata lacks an array manifest")
        expected = pos + sum(8 * int(np.prod(m["shape"], dtype=np.int64)) for m in manifest)
        if len(raw) != expected:
            raise DatasetFormatError(f"container has {len(raw)} bytes, manifest declares {expected}")
        arrays = {}
        for m in manifest:
            count = int(np.prod(m["shape"], dtype=np.int64))
            arrays[m["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(m["shape"]).astype(np.float64)
            pos += 8 * count
        meta.pop("format_version", None)
        problem = ProblemSpec.from_dict(meta.pop("problem"))
        for name in ("coords", "inputs"):
            if name not in arrays:
                raise DatasetFormatError(f"missing array {name!r}")
        return cls(
            problem,
            arrays["inputs"],
            arrays["coords"],
            arrays.get("outputs"),
            arrays.get("fine_inputs"),
            meta,
        )

    @classmethod
    def load(cls, path) -> "OperatorDataset":
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# generation


def _bilinear_on_nodes(s: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return interp_bilinear(s, np.linspace(0.0, 1.0, s.shape[0]), coords)


class _Generator:
    """Per-problem sampler / solver; sample ``i`` depends only on ``(seed, i)``."""

    def __init__(self, problem: ProblemSpec, seed: int):
        self.p = problem
        self.seed = seed
        self.fine = problem.fine_grid()
        if problem.tag in ("antiderivative", "reaction_diffusion"):
            self.chol = gp_cholesky(problem.gp, self.fine)

    def _rng(self, i: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, _SAMPLE_STREAM, i])

    def sample(self, i: int):
        """Returns ``(branch_input, fine_field)``; ``fine_field`` is ``None`` for darcy_features."""
        p = self.p
        rng = self._rng(i)
        if p.tag in ("antiderivative", "reaction_diffusion"):
            fine = p.gp.mean + self.chol @ rng.standard_normal(len(self.fine))
            return fine[:: p.fine_factor].copy(), fine
        if p.tag == "darcy_features":
            return rng.uniform(0.0, 1.0, size=p.dim), None
        g = self.fine
        log_field = sample_gp_tensor(p.gp, g, g, 1, int(rng.integers(2**63 - 1)))[0]
        field_ = np.exp(log_field)
        return coarse_sample(field_, p.coarse), field_.ravel()

    def solve(self, u: np.ndarray, fine, coords: np.ndarray) -> np.ndarray:
        return solve_outputs(self.p, u, fine, coords)


def coarse_sample(field_: np.ndarray, coarse: int) -> np.ndarray:
    """Values of a nodal field at the ``coarse x coarse`` cell centres."""
    n = field_.shape[0]
    g = np.linspace(0.0, 1.0, n)
    c = (np.arange(coarse) + 0.5) / coarse
    pts = np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1).reshape(-1, 2)
    return interp_bilinear(field_, g, pts)


def solve_outputs(problem: ProblemSpec, u: np.ndarray, fine, coords: np.ndarray) -> np.ndarray:
    """Reference solution of one input evaluated at ``coords``."""
    p = problem
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, p.coord_dim)
    if p.tag == "antiderivative":
        grid = p.fine_grid()
        if fine is None:
            fine = np.interp(grid, p.sensors()[:, 0], u)
        s = solve_antiderivative(fine, grid)
        return interp_1d(s, grid, coords[:, 0])
    if p.tag == "reaction_diffusion":
        sensors = p.sensors()[:, 0]
        if p.rd_nx == p.dim:
            x, t, s = solve_reaction_diffusion(u, p.rd_nx, p.rd_nt, diffusion=p.diffusion, reaction=p.reaction)
        else:
            src, grid = (u, sensors) if fine is None else (fine, p.fine_grid())
            x, t, s = solve_reaction_diffusion(src, p.rd_nx, p.rd_nt, u_grid=grid, diffusion=p.diffusion, reaction=p.reaction)
        # s is (t, x); interpolate at (x, t)
        return interp_bilinear(s.T, x, coords) if p.rd_nx == p.rd_nt else _interp_rect(s, x, t, coords)
    if p.tag == "darcy_features":
        field_ = field_on_grid(u, p.solver_n)
    else:
        field_ = np.asarray(fine).reshape(p.solver_n, p.solver_n)
    s = solve_darcy(field_, p.source)
    return _bilinear_on_nodes(s, coords)


def _interp_rect(s_tx: np.ndarray, x: np.ndarray, t: np.ndarray, coords: np.ndarray) -> np.ndarray:
    from scipy.interpolate import RegularGridInterpolator

    return RegularGridInterpolator((x, t), s_tx.T)(coords)


def make_dataset(
    problem: ProblemSpec,
    n_unlabeled: int,
    n_labeled: int,
    seed: int,
    coords: Optional[np.ndarray] = None,
    coords_seed: Optional[int] = None,
) -> OperatorDataset:
    """Draw ``n_unlabeled + n_labeled`` inputs; solve the last ``n_labeled``.

    Output coordinates are shared by all rows.  Pass ``coords`` (e.g. from the
    training set) to reuse them; otherwise they are drawn from
    ``coords_seed`` (default ``seed``).
    """
    if n_unlabeled < 0 or n_labeled < 0:
        raise ValueError("sample counts must be non-negative")
    if coords is None:
        cs = seed if coords_seed is None else coords_seed
        coords = problem.observation_coords(np.random.default_rng([cs, _COORD_STREAM]))
        coords_meta = {"coords_seed": int(cs)}
    else:
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, problem.coord_dim)
        coords_meta = {"coords": coords.tolist()}
    gen = _Generator(problem, seed)
    n = n_unlabeled + n_labeled
    inputs = np.zeros((n, problem.dim))
    fine_grid = problem.fine_grid()
    fine_size = 0 if fine_grid is None else (len(fine_grid) ** 2 if problem.tag == "darcy_cg" else len(fine_grid))
    fine = np.zeros((n, fine_size)) if fine_size else None
    outputs = np.full((n, coords.shape[0]), np.nan)
    for i in range(n):
        u, f = gen.sample(i)
        inputs[i] = u
        if fine is not None:
            fine[i] = f
        if i >= n_unlabeled:
            outputs[i] = gen.solve(u, f, coords)
    meta = {
        "generator": {
            "seed": int(seed),
            "n_unlabeled": int(n_unlabeled),
            "n_labeled": int(n_labeled),
            **coords_meta,
        }
    }
    return OperatorDataset(problem, inputs, coords, outputs if n_labeled else None, fine, meta)


def regenerate(metadata: dict, problem: ProblemSpec) -> OperatorDataset:
    """Rebuild a dataset from the generation record in its metadata."""
    g = metadata["generator"]
    coords = np.asarray(g["coords"]) if "coords" in g else None
    return make_dataset(problem, g["n_unlabeled"], g["n_labeled"], g["seed"], coords=coords, coords_seed=g.get("coords_seed"))


def prior_sampler(problem: ProblemSpec):
    """``sampler(n, seed) -> (n, dim)`` draws of branch inputs from the input prior.

    1-D problems sample the GP directly at the sensors (the exact marginal of
    sub-sampling a fine-grid draw); Darcy variants reuse the dataset generator.
    """
    if problem.tag in ("antiderivative", "reaction_diffusion"):
        sensors = problem.sensors()[:, 0]
        chol = gp_cholesky(problem.gp, sensors)

        def sample(n: int, seed) -> np.ndarray:
            z = np.random.default_rng(seed).standard_normal((n, len(sensors)))
            return problem.gp.mean + z @ chol.T

        return sample

    if problem.tag == "darcy_features":

        def sample(n: int, seed) -> np.ndarray:
            return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, problem.dim))

        return sample

    def sample(n: int, seed) -> np.ndarray:
        gen = _Generator(problem, int(np.random.default_rng(seed).integers(2**63 - 1)))
        return np.stack([gen.sample(i)[0] for i in range(n)]) if n else np.zeros((0, problem.dim))

    return sample
