"""Cross-fitted doubly robust pseudo-outcomes for survival treatment effects, fitted jointly over a time grid."""

from .data import (Dataset, FoldAssignment, StepFunction, SubjectRecord, TimeGrid, assign_folds,
                   build_time_grid, kaplan_meier, read_csv, validate_dataset, write_csv)
from .harness import (ExperimentConfig, ExperimentSummary, ProfileQuery, ReplicateMetrics,
                      estimate_cate_real, export_results, mc_ci, run_experiment, run_replicate)
from .network import MultiOutputMLP, TrainConfig, forward, gradient, init_mlp, train
from .nuisance import NuisanceSet, fit_cox, fit_logistic, fit_nuisance_set, oracle_nuisance
from .pseudo import PseudoOutcomeMatrix, cross_fit_pseudo_outcomes, pseudo_outcomes
from .simulate import generate, params_for, true_cate

__version__ = "0.1.0"
