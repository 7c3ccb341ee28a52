"""Benchmark problems: input priors, reference solvers, residuals and datasets."""

from idon.problems.dataset import OperatorDataset, make_dataset, prior_sampler, regenerate, solve_outputs
from idon.problems.features import eval_feature_field, feature_matrix
from idon.problems.gp import GpSpec, gp_cholesky, sample_gp, sample_gp_tensor
from idon.problems.residuals import ResidualOperator, residual_operator
from idon.problems.solvers import solve_antiderivative, solve_darcy, solve_reaction_diffusion
from idon.problems.spec import PROBLEMS, ProblemSpec, problem_spec

__all__ = [
    "GpSpec",
    "OperatorDataset",
    "PROBLEMS",
    "ProblemSpec",
    "ResidualOperator",
    "eval_feature_field",
    "feature_matrix",
    "gp_cholesky",
    "make_dataset",
    "prior_sampler",
    "problem_spec",
    "regenerate",
    "residual_operator",
    "sample_gp",
    "sample_gp_tensor",
    "solve_antiderivative",
    "solve_darcy",
    "solve_outputs",
    "solve_reaction_diffusion",
]
