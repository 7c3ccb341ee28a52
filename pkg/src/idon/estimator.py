"""Scikit-learn style front end for the invertible DeepONet and its posterior."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from idon import bayes
from idon.checkpoint import Checkpoint
from idon.networks import Architecture, branch_forward, branch_inverse, init_params
from idon.operator import TrunkMatrix, assemble_trunk_matrix, forward_map, inverse_map
from idon.problems.dataset import OperatorDataset, prior_sampler
from idon.problems.spec import ProblemSpec, problem_spec
from idon.training import LossWeights, TrainConfig, adam_init, train


class InvertibleDeepONet(TransformerMixin, RegressorMixin, BaseEstimator):
    """Invertible DeepONet trained on labeled and unlabeled input functions.

    ``fit(X, y, coords=...)`` takes branch inputs ``X`` of shape ``(n, D)`` and
    solution values ``y`` of shape ``(n, K)`` at the shared ``coords``; rows of
    ``y`` that are entirely NaN are treated as unlabeled and only enter the
    physics and inverse-consistency losses.

    ``predict`` maps inputs to solution values, ``transform`` returns the
    branch coefficients ``b``, ``predict_inverse`` recovers inputs from
    solution values.

    Parameters
    ----------
    problem : str or ProblemSpec
        Benchmark tag (full-scale defaults) or a complete problem description.
    n_blocks, coupling_hidden, trunk_hidden, s_max
        Architecture; see :class:`idon.networks.Architecture`.
    iterations, batch_size_unlabeled, labeled_per_batch, lr0, decay_rate, decay_every, eps
        Optimizer and loss settings; see :class:`idon.training.TrainConfig`.
    clip_norm : float or None
        Rescale the gradient when its global norm exceeds this value.
    detach_trunk_in_inverse_losses : bool
        Stop gradients through ``Y`` inside the least-squares solve of the
        inverse losses.
    loss_weights : LossWeights or None
    warm_start : bool
        Continue from the fitted state (including optimizer moments) instead
        of reinitializing.
    random_state : int
    """

    def __init__(
        self,
        problem="antiderivative",
        n_blocks: int = 2,
        coupling_hidden: tuple = (),
        trunk_hidden: tuple = (100, 100, 100, 100),
        s_max: float = 5.0,
        iterations: int = 10_000,
        batch_size_unlabeled: int = 100,
        labeled_per_batch: int = 10,
        lr0: float = 1e-3,
        decay_rate: float = 0.9,
        decay_every: int = 1000,
        eps: float = 1e-6,
        clip_norm: Optional[float] = None,
        detach_trunk_in_inverse_losses: bool = False,
        resample_collocation: bool = False,
        loss_weights: Optional[LossWeights] = None,
        log_every: int = 100,
        warm_start: bool = False,
        random_state: int = 0,
    ):
        self.problem = problem
        self.n_blocks = n_blocks
        self.coupling_hidden = coupling_hidden
        self.trunk_hidden = trunk_hidden
        self.s_max = s_max
        self.iterations = iterations
        self.batch_size_unlabeled = batch_size_unlabeled
        self.labeled_per_batch = labeled_per_batch
        self.lr0 = lr0
        self.decay_rate = decay_rate
        self.decay_every = decay_every
        self.eps = eps
        self.clip_norm = clip_norm
        self.detach_trunk_in_inverse_losses = detach_trunk_in_inverse_losses
        self.resample_collocation = resample_collocation
        self.loss_weights = loss_weights
        self.log_every = log_every
        self.warm_start = warm_start
        self.random_state = random_state

    # -- configuration --------------------------------------------------------

    def _problem(self) -> ProblemSpec:
        return self.problem if isinstance(self.problem, ProblemSpec) else problem_spec(self.problem)

    def _architecture(self, problem: ProblemSpec) -> Architecture:
        return Architecture(
            dim=problem.dim,
            coord_dim=problem.coord_dim,
            n_blocks=self.n_blocks,
            coupling_hidden=tuple(self.coupling_hidden),
            trunk_hidden=tuple(self.trunk_hidden),
            s_max=self.s_max,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            batch_size_unlabeled=self.batch_size_unlabeled,
            labeled_per_batch=self.labeled_per_batch,
            lr0=self.lr0,
            decay_rate=self.decay_rate,
            decay_every=self.decay_every,
            seed=self.random_state,
            eps=self.eps,
            clip_norm=self.clip_norm,
            detach_trunk_in_inverse_losses=self.detach_trunk_in_inverse_losses,
            log_every=self.log_every,
            resample_collocation=self.resample_collocation,
        )

    # -- fitting --------------------------------------------------------------

    def fit(self, X, y=None, coords=None, fine_inputs=None, callback=None):
        """Train on inputs ``X`` and (partially NaN) outputs ``y`` at ``coords``."""
        problem = self._problem()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != problem.dim:
            raise ValueError(f"X has {X.shape[1]} features, the problem expects {problem.dim}")
        if coords is None:
            if y is not None:
                raise ValueError("coords are required when outputs are given")
            coords = problem.observation_coords(np.random.default_rng([self.random_state, 0xC00D]))
        if y is not None:
            y = check_array(y, dtype=np.float64, ensure_all_finite="allow-nan")
            if y.shape[0] != X.shape[0]:
                raise ValueError("X and y have different numbers of rows")
            partial = np.isnan(y).any(axis=1) & ~np.isnan(y).all(axis=1)
            if partial.any():
                raise ValueError("output rows must be fully observed or fully NaN")
        dataset = OperatorDataset(problem, X, coords, y, fine_inputs)
        return self.fit_dataset(dataset, callback=callback)

    def fit_dataset(self, dataset: OperatorDataset, callback=None):
        problem = dataset.problem
        arch = self._architecture(problem)
        cfg = self.train_config()
        weights = self.loss_weights or LossWeights()
        resume = self.warm_start and hasattr(self, "params_")
        if resume and self.arch_ != arch:
            raise ValueError("warm start requires an unchanged architecture")
        result = train(
            problem,
            arch,
            dataset,
            cfg,
            weights,
            params=self.params_ if resume else None,
            opt_state=self.opt_state_ if resume else None,
            start_iteration=self.n_iter_ if resume else 0,
            history=self.history_ if resume else None,
            lr_scale=self.lr_scale_ if resume else 1.0,
            callback=callback,
        )
        self._set_state(problem, arch, result.params, result.opt_state, result.iteration, result.lr_scale, dataset.coords)
        self.history_ = result.history
        return self

    def _set_state(self, problem, arch, params, opt_state, iteration, lr_scale, coords):
        self.problem_ = problem
        self.arch_ = arch
        self.params_ = params
        self.opt_state_ = opt_state
        self.n_iter_ = int(iteration)
        self.lr_scale_ = float(lr_scale)
        self.n_features_in_ = arch.dim
        self.history_ = getattr(self, "history_", [])
        self.set_coords(coords)

    def set_coords(self, coords):
        """Assemble and cache the trunk matrix for a new coordinate set."""
        self.trunk_matrix_ = self.trunk_matrix(coords)
        self.coords_ = self.trunk_matrix_.coords
        return self

    def trunk_matrix(self, coords) -> TrunkMatrix:
        return assemble_trunk_matrix(self.params_["trunk"], coords, self.arch_.coord_dim, self.problem_.factor_or_none())

    def _ym(self, coords) -> TrunkMatrix:
        check_is_fitted(self, "params_")
        return self.trunk_matrix_ if coords is None else self.trunk_matrix(coords)

    def _check_inputs(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    # -- maps -----------------------------------------------------------------

    def predict(self, X, coords=None) -> np.ndarray:
        """Solution values ``Y b(u)`` at the fitted (or given) coordinates."""
        X = self._check_inputs(X)
        return forward_map(self.params_, self.arch_, X, self._ym(coords))

    def transform(self, X) -> np.ndarray:
        """Branch coefficients ``b(u)``."""
        b, _ = branch_forward(self.params_["branch"], self._check_inputs(X), self.arch_)
        return np.asarray(b)

    def inverse_transform(self, B) -> np.ndarray:
        """Inputs ``u`` with ``b(u) = B``."""
        check_is_fitted(self, "params_")
        B = check_array(B, dtype=np.float64)
        return np.asarray(branch_inverse(self.params_["branch"], B, self.arch_))

    def predict_inverse(self, S, coords=None, eps: Optional[float] = None) -> np.ndarray:
        """Inputs recovered from solution values by regularized least squares and the branch inverse."""
        check_is_fitted(self, "params_")
        S = check_array(S, dtype=np.float64)
        return inverse_map(self.params_, self.arch_, S, self._ym(coords), self.eps if eps is None else eps)

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean relative L2 error of the forward map (higher is better)."""
        from idon.evaluation import relative_errors

        return -float(np.average(relative_errors(self.predict(X), y), weights=sample_weight))

    # -- checkpoints ----------------------------------------------------------

    def to_checkpoint(self, metadata: Optional[dict] = None) -> Checkpoint:
        check_is_fitted(self, "params_")
        meta = {"coords": np.asarray(self.coords_).tolist(), **(metadata or {})}
        return Checkpoint(
            arch=self.arch_,
            params=self.params_,
            iteration=self.n_iter_,
            seed=self.random_state,
            problem=self.problem_,
            train_config=self.train_config(),
            loss_weights=self.loss_weights or LossWeights(),
            opt_state=self.opt_state_,
            lr_scale=self.lr_scale_,
            metadata=meta,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, coords=None) -> "InvertibleDeepONet":
        cfg = ckpt.train_config or TrainConfig()
        arch = ckpt.arch
        problem = ckpt.problem or ProblemSpec(tag="antiderivative", dim=arch.dim)
        est = cls(
            problem=problem,
            n_blocks=arch.n_blocks,
            coupling_hidden=arch.coupling_hidden,
            trunk_hidden=arch.trunk_hidden,
            s_max=arch.s_max,
            iterations=cfg.iterations,
            batch_size_unlabeled=cfg.batch_size_unlabeled,
            labeled_per_batch=cfg.labeled_per_batch,
            lr0=cfg.lr0,
            decay_rate=cfg.decay_rate,
            decay_every=cfg.decay_every,
            eps=cfg.eps,
            clip_norm=cfg.clip_norm,
            detach_trunk_in_inverse_losses=cfg.detach_trunk_in_inverse_losses,
            resample_collocation=cfg.resample_collocation,
            loss_weights=ckpt.loss_weights,
            log_every=cfg.log_every,
            random_state=ckpt.seed,
        )
        coords = ckpt.metadata.get("coords") if coords is None else coords
        if coords is None:
            coords = problem.observation_coords(np.random.default_rng([ckpt.seed, 0xC00D]))
        opt = ckpt.opt_state or adam_init(ckpt.params)
        est._set_state(problem, arch, ckpt.params, opt, ckpt.iteration, ckpt.lr_scale, coords)
        return est

    def init_only(self, coords=None):
        """Initialize parameters without training (equivalent to ``iterations=0``)."""
        problem = self._problem()
        arch = self._architecture(problem)
        params = init_params(arch, self.random_state)
        if coords is None:
            coords = problem.observation_coords(np.random.default_rng([self.random_state, 0xC00D]))
        self._set_state(problem, arch, params, adam_init(params), 0, 1.0, coords)
        self.history_ = []
        return self


class MixturePosterior(BaseEstimator):
    """Gaussian-mixture posterior over inputs given noisy solution observations.

    ``fit(model)`` draws ``n_prior_samples`` inputs from the problem prior,
    pushes them through the branch net and fits an ``n_components`` mixture.
    ``infer(s_hat, coords, sigma2)`` applies the closed-form update and returns
    ``n_posterior_samples`` inputs drawn through the branch inverse.
    """

    def __init__(
        self,
        n_components: int = 2,
        n_prior_samples: int = 10_000,
        n_posterior_samples: int = 5_000,
        n_init: int = 5,
        max_iter: int = 500,
        tol: float = 1e-8,
        reg: float = 1e-8,
        random_state: int = 0,
    ):
        self.n_components = n_components
        self.n_prior_samples = n_prior_samples
        self.n_posterior_samples = n_posterior_samples
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.reg = reg
        self.random_state = random_state

    def fit(self, model: InvertibleDeepONet, sampler=None):
        check_is_fitted(model, "params_")
        sampler = sampler or prior_sampler(model.problem_)
        b = bayes.pushforward_samples(model.params_, model.arch_, sampler, self.n_prior_samples, [self.random_state, 1])
        self.prior_ = bayes.fit_gmm(
            b,
            self.n_components,
            seed=self.random_state,
            n_init=self.n_init,
            max_iter=self.max_iter,
            tol=self.tol,
            reg=self.reg,
        )
        self.model_ = model
        return self

    def infer(self, s_hat, coords, sigma2: float) -> bayes.PosteriorResult:
        check_is_fitted(self, "prior_")
        ym = self.model_.trunk_matrix(coords)
        obs = bayes.ObservationModel(s_hat, sigma2, ym.y)
        post = bayes.posterior_update(self.prior_, obs)
        return bayes.pushback_sample(
            post, self.model_.params_, self.model_.arch_, self.n_posterior_samples, [self.random_state, 2]
        )
