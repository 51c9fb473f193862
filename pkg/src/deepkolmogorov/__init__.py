"""Deep-learning approximation of linear Kolmogorov PDEs on a box."""

__version__ = "0.1.0"

from .network import NetworkSpec, ParameterSet, BatchNormRunningStats, xavier_init, forward_train, forward_infer, backward
from .optimizer import AdamState, Schedule, adam_step, sgd_step, lr
from .problems import PROBLEM_NAMES, make_problem, default_widths
from .sde_sim import Domain, SdeProblem, make_grid, sample_initial, simulate_terminal, cholesky_factor
from .training import TrainConfig, Checkpoint, RunLog, train, save_checkpoint, load_checkpoint
from .reference import ReferenceEstimate, heat_exact
from .evaluation import ErrorReport, relative_errors, aggregate_over_runs, strong_convergence
