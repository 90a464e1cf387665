"""Efficiency bounds and efficient scores for several conditional moment
restrictions with different conditioning variables, computed exactly on
finite-support laws."""

__version__ = "0.1.0"

from .errors import ContractViolation, NumericalFailure, OptimizationError
from .probability import DiscreteLaw, SampleSet, cond_expectation, cond_variance, empirical_law, sample_from
from .model import MomentBlock, MomentModel, check_assumptions, stack_moments, block_conditional_jacobian
from .instruments import InstrumentFamily, build_stacked, default_family, projected_instrument
from .infobound import fisher_info_unconditional, info_bound_sequence, info_for_instruments
from .scorefield import ScoreField
from .efficient_score import (backfit_solve, backfit_step, chamberlain_score, efficient_information,
                              oracle_projection, rho_projection, sequential_closed_form)
from .missing_data import (MissingDataSpec, a2_from_a1, build_observational_model, contraction_solve_a1,
                           parametric_selection_score)
from .estimation import efficient_gmm_solve, monte_carlo, plug_in_score_field, preliminary_estimator
from .dgp import build_dgp

__all__ = [
    "ContractViolation", "NumericalFailure", "OptimizationError",
    "DiscreteLaw", "SampleSet", "cond_expectation", "cond_variance", "empirical_law", "sample_from",
    "MomentBlock", "MomentModel", "check_assumptions", "stack_moments", "block_conditional_jacobian",
    "InstrumentFamily", "build_stacked", "default_family", "projected_instrument",
    "fisher_info_unconditional", "info_bound_sequence", "info_for_instruments",
    "ScoreField",
    "backfit_solve", "backfit_step", "chamberlain_score", "efficient_information",
    "oracle_projection", "rho_projection", "sequential_closed_form",
    "MissingDataSpec", "a2_from_a1", "build_observational_model", "contraction_solve_a1",
    "parametric_selection_score",
    "efficient_gmm_solve", "monte_carlo", "plug_in_score_field", "preliminary_estimator",
    "build_dgp",
]
