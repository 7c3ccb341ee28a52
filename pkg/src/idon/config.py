"""Experiment configuration files (TOML, ``config_version = 1``).

Example::

    config_version = 1
    problem = "antiderivative"
    seed = 0

    [problem_options]        # ProblemSpec field overrides
    n_obs = 100

    [data]
    n_unlabeled = 2000
    labeled_fraction = 0.1   # or n_labeled = 200
    n_test = 200

    [architecture]
    n_blocks = 2
    trunk_hidden = [100, 100, 100, 100]

    [train]
    iterations = 10000

    [loss_weights]
    residual = 1.0

    [bayes]
    sigma2 = 0.001
    n_obs = 100

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from idon.exceptions import ConfigError
from idon.networks import Architecture
from idon.problems.spec import PROBLEMS, ProblemSpec, problem_spec
from idon.training import LossWeights, TrainConfig

CONFIG_VERSION = 1

_SECTIONS = {
    "problem_options": None,  # validated against ProblemSpec
    "data": {
        "n_unlabeled": 2000,
        "n_labeled": None,
        "labeled_fraction": 0.1,
        "n_test": 200,
        "train_path": None,
        "test_path": None,
        "test_seed": None,
    },
    "architecture": {
        "n_blocks": 2,
        "coupling_hidden": [],
        "trunk_hidden": [100, 100, 100, 100],
        "split": None,
        "s_max": 5.0,
    },
    "train": {
        **{f.name: f.default for f in fields(TrainConfig) if f.name != "seed"},
        "checkpoint_every": 1000,
    },
    "loss_weights": {
        **{f.name: f.default for f in fields(LossWeights) if f.name != "disabled"},
        "disabled": [],
    },
    "eval": {
        "reference": "",
    },
    "bayes": {
        "sigma2": None,
        "n_obs": 100,
        "n_components": 2,
        "n_prior_samples": 10_000,
        "n_posterior_samples": 5_000,
        "n_init": 5,
        "observations": None,
        "truth_index": 0,
        "obs_seed": None,
    },
    "mcmc": {
        "method": "pcn",
        "n_samples": 40_000,
        "beta": 0.1,
        "step": 0.02,
        "burn": 0.25,
        "thin": 1,
        "seed": None,
        "reference_report": None,
    },
    "sweep": {
        "axis": "labeled_fraction",
        "values": [],
    },
}

_TOP = {"config_version", "problem", "seed", "out"}


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    seed: int
    sections: dict
    out: str | None = None
    raw: dict = field(default_factory=dict)

    # -- derived views --------------------------------------------------------

    @property
    def data(self) -> dict:
        return self.sections["data"]

    @property
    def n_labeled(self) -> int:
        d = self.data
        if d["n_labeled"] is not None:
            return int(d["n_labeled"])
        return int(round(d["labeled_fraction"] * d["n_unlabeled"]))

    @property
    def arch(self) -> Architecture:
        a = self.sections["architecture"]
        return Architecture(
            dim=self.problem.dim,
            coord_dim=self.problem.coord_dim,
            n_blocks=a["n_blocks"],
            coupling_hidden=tuple(a["coupling_hidden"]),
            trunk_hidden=tuple(a["trunk_hidden"]),
            split=a["split"],
            s_max=float("inf") if a["s_max"] is None else a["s_max"],
        )

    @property
    def train_config(self) -> TrainConfig:
        t = {k: v for k, v in self.sections["train"].items() if k != "checkpoint_every"}
        return TrainConfig(seed=self.seed, **t)

    @property
    def loss_weights(self) -> LossWeights:
        w = dict(self.sections["loss_weights"])
        w["disabled"] = tuple(w["disabled"])
        return LossWeights(**w)

    def section(self, name: str) -> dict:
        return self.sections[name]

    def to_dict(self) -> dict:
        return {
            "config_version": CONFIG_VERSION,
            "problem": self.problem.to_dict(),
            "seed": self.seed,
            "out": self.out,
            **copy.deepcopy(self.sections),
        }

    def hash(self) -> str:
        """SHA-256 (first 16 hex digits) of the canonical resolved configuration."""
        doc = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(self.problem, int(seed), copy.deepcopy(self.sections), self.out, self.raw)

    def replace_in(self, section: str, **values) -> "ExperimentConfig":
        sections = copy.deepcopy(self.sections)
        sections[section].update(values)
        return ExperimentConfig(self.problem, self.seed, sections, self.out, self.raw)


def _merge_section(name: str, given: dict) -> dict:
    defaults = _SECTIONS[name]
    if not isinstance(given, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return {**copy.deepcopy(defaults), **given}


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    unknown = set(doc) - _TOP - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if doc.get("config_version") != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}")
    tag = doc.get("problem")
    if tag not in PROBLEMS:
        raise ConfigError(f"problem must be one of {', '.join(PROBLEMS)}")
    options = doc.get("problem_options", {})
    try:
        problem = problem_spec(tag, **options)
    except TypeError as exc:
        raise ConfigError(f"[problem_options]: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[problem_options]: {exc}") from None
    sections = {name: _merge_section(name, doc.get(name, {})) for name in _SECTIONS if name != "problem_options"}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    d = sections["data"]
    if d["n_labeled"] is not None and "labeled_fraction" in doc.get("data", {}):
        raise ConfigError("give either data.n_labeled or data.labeled_fraction, not both")
    for key in ("train_path", "test_path"):
        if d[key] is not None and base_dir is not None:
            d[key] = str((base_dir / d[key]).resolve())
            if not Path(d[key]).exists():
                raise ConfigError(f"data.{key} does not exist: {d[key]}")
    b = sections["bayes"]
    if b["observations"] is not None and base_dir is not None:
        b["observations"] = str((base_dir / b["observations"]).resolve())
    cfg = ExperimentConfig(problem, seed, sections, doc.get("out"), doc)
    try:
        cfg.arch, cfg.train_config, cfg.loss_weights
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if sections["sweep"]["axis"] not in ("labeled_fraction", "n_unlabeled"):
        raise ConfigError("sweep.axis must be labeled_fraction or n_unlabeled")
    if sections["mcmc"]["method"] not in ("pcn", "rwm"):
        raise ConfigError("mcmc.method must be pcn or rwm")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, path.parent)
