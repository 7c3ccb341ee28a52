"""Semi-supervised loss assembly and the ADAM training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from idon import autodiff as ad
from idon.exceptions import NonFiniteGradient, TrainingDiverged
from idon.networks import Architecture, branch_forward, branch_inverse
from idon.operator import trunk_jets, trunk_rows
from idon.problems.dataset import OperatorDataset
from idon.problems.residuals import ResidualOperator, residual_operator
from idon.problems.spec import ProblemSpec

logger = logging.getLogger(__name__)

TERMS = ("lf", "li", "bc", "res", "ui")
HISTORY_HEADER = ("iter", "loss_total", "loss_lf", "loss_li", "loss_bc", "loss_res", "loss_ui", "lr")

BETA1 = 0.9
BETA2 = 0.999
EPS_ADAM = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the five loss terms; a term listed in ``disabled`` is skipped."""

    labeled_forward: float = 1.0
    labeled_inverse: float = 1.0
    boundary: float = 1.0
    residual: float = 1.0
    unlabeled_inverse: float = 1.0
    disabled: tuple = ()

    def __post_init__(self):
        for name in ("labeled_forward", "labeled_inverse", "boundary", "residual", "unlabeled_inverse"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        bad = set(self.disabled) - set(TERMS)
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}")

    def weight(self, term: str) -> float:
        if term in self.disabled:
            return 0.0
        return {
            "lf": self.labeled_forward,
            "li": self.labeled_inverse,
            "bc": self.boundary,
            "res": self.residual,
            "ui": self.unlabeled_inverse,
        }[term]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disabled"] = list(self.disabled)
        return d


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10_000
    batch_size_unlabeled: int = 100
    labeled_per_batch: int = 10
    lr0: float = 1e-3
    decay_rate: float = 0.9
    decay_every: int = 1000
    seed: int = 0
    eps: float = 1e-6
    detach_trunk_in_inverse_losses: bool = False
    log_every: int = 100
    resample_collocation: bool = False
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.iterations < 0 or self.decay_every < 1 or self.log_every < 1:
            raise ValueError("iterations must be >= 0, decay_every and log_every >= 1")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    def lr(self, iteration: int) -> float:
        return self.lr0 * self.decay_rate ** (iteration // self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


# --------------------------------------------------------------------------
# loss terms (jax-traceable)


def _sq_norm_mean(r):
    return jnp.mean(jnp.sum(r * r, axis=-1))


def _inverse(params, arch, s, y, eps, detach):
    if detach:
        y = jax.lax.stop_gradient(y)
    b = ad.lsq_solve(y, s.T, eps).T
    return branch_inverse(params["branch"], b, arch)


def labeled_forward_term(params, arch, u, s, y):
    b, _ = branch_forward(params["branch"], u, arch)
    return _sq_norm_mean(s - b @ y.T)


def labeled_inverse_term(params, arch, u, s, y, eps, detach=False):
    return _sq_norm_mean(u - _inverse(params, arch, s, y, eps, detach))


def unlabeled_inverse_term(params, arch, u, y, eps, detach=False, b=None):
    if b is None:
        b, _ = branch_forward(params["branch"], u, arch)
    return _sq_norm_mean(u - _inverse(params, arch, b @ y.T, y, eps, detach))


def surrogate_derivatives(params, b, points, directions, factor=None) -> dict:
    """Prediction and its coordinate derivatives, each ``(batch, P)``."""
    out = {}
    for k in directions:
        e = jnp.zeros(points.shape[-1]).at[k].set(1.0)
        jet = trunk_jets(params["trunk"], points, e, factor)
        if "s" not in out:
            out["s"] = b @ jet.value.T
        out[f"d{k}"] = b @ jet.d1.T
        out[f"dd{k}"] = b @ jet.d2.T
    return out


def residual_term(params, arch, op: ResidualOperator, u, data, points, b=None):
    if b is None:
        b, _ = branch_forward(params["branch"], u, arch)
    d = surrogate_derivatives(params, b, points, op.directions, op.problem.factor_or_none())
    r = op.residual(d, data)
    return jnp.mean(r * r)


def boundary_term(params, arch, op: ResidualOperator, u, points, b=None):
    if b is None:
        b, _ = branch_forward(params["branch"], u, arch)
    s = b @ trunk_rows(params["trunk"], points, op.problem.factor_or_none()).T
    r = op.boundary({"s": s})
    return jnp.mean(r * r)


def loss_terms(params, arch, op, batch: dict, obs_coords, colloc, bc_points, eps, detach, active):
    """All active loss terms for one batch; returns a dict of scalars."""
    y = trunk_rows(params["trunk"], obs_coords, op.problem.factor_or_none())
    terms = {}
    if "lf" in active:
        terms["lf"] = labeled_forward_term(params, arch, batch["u_l"], batch["s_l"], y)
    if "li" in active:
        terms["li"] = labeled_inverse_term(params, arch, batch["u_l"], batch["s_l"], y, eps, detach)
    if {"res", "bc", "ui"} & set(active):
        b_u, _ = branch_forward(params["branch"], batch["u_u"], arch)
        if "res" in active:
            terms["res"] = residual_term(params, arch, op, batch["u_u"], batch["data"], colloc, b=b_u)
        if "bc" in active:
            terms["bc"] = boundary_term(params, arch, op, batch["u_u"], bc_points, b=b_u)
        if "ui" in active:
            terms["ui"] = unlabeled_inverse_term(params, arch, batch["u_u"], y, eps, detach, b=b_u)
    return terms


# --------------------------------------------------------------------------
# public loss wrappers (numpy in, float out)


def loss_labeled_forward(params, arch, u, s, y) -> float:
    return float(labeled_forward_term(params, arch, jnp.atleast_2d(u), jnp.atleast_2d(s), jnp.asarray(y)))


def loss_labeled_inverse(params, arch, u, s, y, eps, detach=False) -> float:
    return float(labeled_inverse_term(params, arch, jnp.atleast_2d(u), jnp.atleast_2d(s), jnp.asarray(y), eps, detach))


def loss_unlabeled_inverse(params, arch, u, y, eps) -> float:
    return float(unlabeled_inverse_term(params, arch, jnp.atleast_2d(u), jnp.asarray(y), eps))


def loss_residual(params, arch, op, u, data, points) -> float:
    data = {k: jnp.asarray(v) for k, v in data.items()}
    return float(residual_term(params, arch, op, jnp.atleast_2d(u), data, jnp.asarray(points)))


def loss_bc(params, arch, op, u, points) -> float:
    return float(boundary_term(params, arch, op, jnp.atleast_2d(u), jnp.asarray(points)))


# --------------------------------------------------------------------------
# ADAM


def adam_init(params) -> dict:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return {"m": zeros, "v": jax.tree_util.tree_map(jnp.zeros_like, params)}


def _adam_update(params, grads, state, lr, t):
    m = jax.tree_util.tree_map(lambda m, g: BETA1 * m + (1 - BETA1) * g, state["m"], grads)
    v = jax.tree_util.tree_map(lambda v, g: BETA2 * v + (1 - BETA2) * g * g, state["v"], grads)
    c1 = 1 - BETA1**t
    c2 = 1 - BETA2**t
    new = jax.tree_util.tree_map(lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + EPS_ADAM), params, m, v)
    return new, {"m": m, "v": v}


def adam_step(params, grads, state, iteration: int, cfg: TrainConfig, lr_scale: float = 1.0):
    """One ADAM update at 0-based ``iteration`` with the decayed learning rate.

    Raises
    ------
    NonFiniteGradient
        If any gradient entry is NaN or infinite.
    """
    ad.check_finite_tree(grads)
    lr = cfg.lr(iteration) * lr_scale
    return _adam_update(params, grads, state, lr, iteration + 1)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    opt_state: dict
    iteration: int
    history: list = field(default_factory=list)
    lr_scale: float = 1.0


class _BatchSchedule:
    """Deterministic batch indices as a pure function of ``(seed, iteration)``."""

    def __init__(self, n_unlabeled: int, bs: int, n_labeled: int, lpb: int, seed: int):
        self.n_u = n_unlabeled
        self.bs = min(bs, n_unlabeled) if n_unlabeled else 0
        self.n_batches = max(1, n_unlabeled // self.bs) if self.bs else 1
        self.n_l = n_labeled
        self.lpb = lpb if n_labeled else 0
        self.seed = seed
        self._perm_u = {}
        self._perm_l = {}

    def _perm(self, cache, stream, epoch, n):
        if epoch not in cache:
            if len(cache) > 4:
                cache.clear()
            cache[epoch] = np.random.default_rng([self.seed, stream, epoch]).permutation(n)
        return cache[epoch]

    def unlabeled(self, it: int) -> np.ndarray:
        if not self.bs:
            return np.zeros(0, dtype=int)
        epoch, pos = divmod(it, self.n_batches)
        perm = self._perm(self._perm_u, 11, epoch, self.n_u)
        return perm[pos * self.bs : (pos + 1) * self.bs]

    def labeled(self, it: int) -> np.ndarray:
        out = np.empty(self.lpb, dtype=int)
        for j in range(self.lpb):
            draw = it * self.lpb + j
            epoch, pos = divmod(draw, self.n_l)
            out[j] = self._perm(self._perm_l, 13, epoch, self.n_l)[pos]
        return out


def collocation_points(problem: ProblemSpec, n: int, seed: int, iteration: Optional[int] = None) -> np.ndarray:
    stream = [seed, 7] if iteration is None else [seed, 7, iteration]
    return problem.collocation_points(n, np.random.default_rng(stream))


def active_terms(weights: LossWeights, has_labeled: bool, has_unlabeled: bool, problem: ProblemSpec) -> tuple:
    active = []
    for t in TERMS:
        if weights.weight(t) == 0:
            continue
        if t in ("lf", "li") and not has_labeled:
            continue
        if t in ("res", "bc", "ui") and not has_unlabeled:
            continue
        if t == "bc" and problem.n_bc == 0:
            continue
        active.append(t)
    return tuple(active)


def clip_by_global_norm(grads, max_norm):
    """Rescale ``grads`` so that their joint 2-norm is at most ``max_norm``."""
    norm = jnp.sqrt(sum(jnp.sum(g * g) for g in jax.tree_util.tree_leaves(grads)))
    scale = jnp.minimum(1.0, max_norm / jnp.maximum(norm, 1e-300))
    return jax.tree_util.tree_map(lambda g: g * scale, grads)


def make_step(arch, op, weights: LossWeights, active, eps, detach, clip_norm=None):
    """Jitted ``(params, state, lr, t, batch, obs, colloc, bc) -> (params, state, total, terms, ok)``."""
    w = {t: weights.weight(t) for t in active}

    def total_loss(params, batch, obs, colloc, bc):
        terms = loss_terms(params, arch, op, batch, obs, colloc, bc, eps, detach, active)
        total = sum(w[t] * terms[t] for t in active)
        return total, terms

    @jax.jit
    def step(params, state, lr, t, batch, obs, colloc, bc):
        (total, terms), grads = jax.value_and_grad(total_loss, has_aux=True)(params, batch, obs, colloc, bc)
        ok = jnp.all(jnp.array([jnp.all(jnp.isfinite(g)) for g in jax.tree_util.tree_leaves(grads)]))
        ok = ok & jnp.isfinite(total)
        if clip_norm is not None:
            grads = clip_by_global_norm(grads, clip_norm)
        new_params, new_state = _adam_update(params, grads, state, lr, t)
        return new_params, new_state, total, terms, ok

    return step, total_loss


def train(
    problem: ProblemSpec,
    arch: Architecture,
    dataset: OperatorDataset,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    params=None,
    opt_state=None,
    start_iteration: int = 0,
    history: Optional[list] = None,
    lr_scale: float = 1.0,
    callback: Optional[Callable] = None,
    checkpoint_every: int = 0,
    on_checkpoint: Optional[Callable] = None,
) -> TrainResult:
    """Minimize the weighted loss with ADAM for ``cfg.iterations`` more steps.

    Resuming with the state of an earlier call continues the exact same
    trajectory.  History rows are ``dict(iter=..., total=..., lf=..., ...)``.
    With ``checkpoint_every > 0``, ``on_checkpoint(result)`` receives the
    state after every multiple of that many completed iterations.

    Raises
    ------
    TrainingDiverged
        After a second non-finite loss; ``exc.result`` holds the last finite state.
    """
    from idon.networks import init_params

    if dataset.problem.dim != arch.dim:
        raise ValueError("architecture and dataset dimensions differ")
    op = residual_operator(problem)
    params = init_params(arch, cfg.seed) if params is None else params
    opt_state = adam_init(params) if opt_state is None else opt_state
    history = [] if history is None else list(history)

    mask = dataset.labeled_mask
    lab = np.flatnonzero(mask)
    unl = np.flatnonzero(~mask)
    active = active_terms(weights, len(lab) > 0 and cfg.labeled_per_batch > 0, len(unl) > 0, problem)
    if not active:
        raise ValueError("no active loss terms for this dataset / weight combination")
    logger.info("training %s: active terms %s, %d unlabeled, %d labeled", problem.tag, active, len(unl), len(lab))

    u_all = dataset.inputs
    s_all = dataset.outputs
    obs = jnp.asarray(dataset.coords)
    needs_colloc = "res" in active
    colloc = collocation_points(problem, problem.n_res, cfg.seed)
    if needs_colloc and not cfg.resample_collocation:
        fine_u = None if dataset.fine_inputs is None else dataset.fine_inputs[unl]
        field_data = op.prepare(u_all[unl], fine_u, colloc)
    bc = jnp.asarray(problem.boundary_points(problem.n_bc)) if "bc" in active else jnp.zeros((1, problem.coord_dim))

    schedule = _BatchSchedule(len(unl), cfg.batch_size_unlabeled, len(lab), cfg.labeled_per_batch, cfg.seed)
    step, _ = make_step(arch, op, weights, active, cfg.eps, cfg.detach_trunk_in_inverse_losses, cfg.clip_norm)

    def batch_at(it):
        batch = {}
        if "lf" in active or "li" in active:
            li = lab[schedule.labeled(it)]
            batch["u_l"] = jnp.asarray(u_all[li])
            batch["s_l"] = jnp.asarray(s_all[li])
        if {"res", "bc", "ui"} & set(active):
            pos = schedule.unlabeled(it)
            batch["u_u"] = jnp.asarray(u_all[unl[pos]])
            if needs_colloc:
                if cfg.resample_collocation:
                    pts = collocation_points(problem, problem.n_res, cfg.seed, it)
                    fine_u = None if dataset.fine_inputs is None else dataset.fine_inputs[unl[pos]]
                    data = op.prepare(u_all[unl[pos]], fine_u, pts)
                    batch["colloc"] = jnp.asarray(pts)
                else:
                    data = {k: v[pos] for k, v in field_data.items()}
                batch["data"] = {k: jnp.asarray(v) for k, v in data.items()}
            else:
                batch["data"] = {}
        return batch

    colloc_j = jnp.asarray(colloc)
    end = start_iteration + cfg.iterations
    it = start_iteration
    snapshot = (params, opt_state, it, len(history))
    retried = False
    while it < end:
        batch = batch_at(it)
        pts = batch.pop("colloc", colloc_j)
        lr = cfg.lr(it) * lr_scale
        new_params, new_state, total, terms, ok = step(params, opt_state, lr, it + 1, batch, obs, pts, bc)
        total = float(total)
        if not (bool(ok) and math.isfinite(total)):
            params, opt_state, it, n_hist = snapshot
            del history[n_hist:]
            if retried:
                result = TrainResult(params, opt_state, it, history, lr_scale)
                exc = TrainingDiverged(f"non-finite loss at iteration {it} after learning-rate halving")
                exc.result = result
                raise exc
            retried = True
            lr_scale *= 0.5
            logger.warning("non-finite loss; halving learning rate and resuming from iteration %d", it)
            continue
        if it % cfg.log_every == 0:
            row = {"iter": it, "total": total, **{t: float(terms.get(t, 0.0)) for t in TERMS}, "lr": lr}
            history.append(row)
            if callback is not None:
                callback(row)
            snapshot = (params, opt_state, it, len(history) - 1)
        params, opt_state = new_params, new_state
        it += 1
        if on_checkpoint is not None and checkpoint_every > 0 and it % checkpoint_every == 0 and it < end:
            on_checkpoint(TrainResult(params, opt_state, it, list(history), lr_scale))
    return TrainResult(params, opt_state, it, history, lr_scale)


def write_history(history: list, path, append: bool = False) -> None:
    """Loss history CSV with header ``iter,loss_total,loss_lf,...,lr``."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["iter"], repr(row["total"]), *(repr(row[t]) for t in TERMS), repr(row["lr"])])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(
            {"iter": int(r["iter"]), "total": float(r["loss_total"]), **{t: float(r[f"loss_{t}"]) for t in TERMS}, "lr": float(r["lr"])}
        )
    return out
