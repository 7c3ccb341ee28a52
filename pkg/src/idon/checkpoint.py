"""Text checkpoints: one JSON document holding everything needed to resume.

Schema (``format_version`` 1)::

    {
      "format": "idon-checkpoint",
      "format_version": 1,
      "architecture": {...},           # Architecture.to_dict()
      "problem": {...} | null,         # ProblemSpec.to_dict()
      "train_config": {...} | null,    # TrainConfig.to_dict()
      "loss_weights": {...} | null,
      "seed": int,
      "iteration": int,                # completed ADAM steps
      "lr_scale": float,               # 0.5 after a divergence retry
      "s_max": float | null,           # log-scale clamp, null when disabled
      "detach_trunk_in_inverse_losses": bool,
      "params": {"branch": [{"k": [[W, b], ...], "r": [...]}, ...],
                 "trunk": [[W, b], ...]},
      "adam": {"m": <params tree>, "v": <params tree>} | null,
      "metadata": {...}
    }

Floats are written with Python's shortest round-trip representation (at most
17 significant digits), so a save/load cycle reproduces every float64 exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from idon.exceptions import ConfigError
from idon.networks import Architecture
from idon.problems.spec import ProblemSpec
from idon.training import LossWeights, TrainConfig

FORMAT = "idon-checkpoint"
FORMAT_VERSION = 1


def _to_lists(tree):
    return jax.tree_util.tree_map(lambda a: np.asarray(a, dtype=np.float64).tolist(), tree)


def _params_from_lists(data) -> dict:
    def layers(ls):
        return [[jnp.asarray(np.asarray(w, dtype=np.float64)), jnp.asarray(np.asarray(b, dtype=np.float64))] for w, b in ls]

    return {
        "branch": [{"k": layers(blk["k"]), "r": layers(blk["r"])} for blk in data["branch"]],
        "trunk": layers(data["trunk"]),
    }


@dataclass
class Checkpoint:
    arch: Architecture
    params: dict
    iteration: int = 0
    seed: int = 0
    problem: Optional[ProblemSpec] = None
    train_config: Optional[TrainConfig] = None
    loss_weights: Optional[LossWeights] = None
    opt_state: Optional[dict] = None
    lr_scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        cfg = self.train_config
        return {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "architecture": self.arch.to_dict(),
            "problem": None if self.problem is None else self.problem.to_dict(),
            "train_config": None if cfg is None else cfg.to_dict(),
            "loss_weights": None if self.loss_weights is None else self.loss_weights.to_dict(),
            "seed": int(self.seed),
            "iteration": int(self.iteration),
            "lr_scale": float(self.lr_scale),
            "s_max": None if not np.isfinite(self.arch.s_max) else float(self.arch.s_max),
            "detach_trunk_in_inverse_losses": bool(cfg.detach_trunk_in_inverse_losses) if cfg else False,
            "params": _to_lists(self.params),
            "adam": None if self.opt_state is None else {k: _to_lists(v) for k, v in self.opt_state.items()},
            "metadata": self.metadata,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        if data.get("format") != FORMAT:
            raise ConfigError("not an idon checkpoint")
        if data.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {data.get('format_version')!r}")
        wd = data.get("loss_weights")
        if wd is not None:
            wd = dict(wd)
            wd["disabled"] = tuple(wd.get("disabled", ()))
        adam = data.get("adam")
        return cls(
            arch=Architecture.from_dict(data["architecture"]),
            params=_params_from_lists(data["params"]),
            iteration=int(data["iteration"]),
            seed=int(data["seed"]),
            problem=None if data.get("problem") is None else ProblemSpec.from_dict(data["problem"]),
            train_config=None if data.get("train_config") is None else TrainConfig.from_dict(data["train_config"]),
            loss_weights=None if wd is None else LossWeights(**wd),
            opt_state=None if adam is None else {k: _params_from_lists(v) for k, v in adam.items()},
            lr_scale=float(data.get("lr_scale", 1.0)),
            metadata=data.get("metadata", {}),
        )

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"unreadable checkpoint: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.loads(Path(path).read_text())
