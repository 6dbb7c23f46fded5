"""fbsdekit: solvers for coupled forward-backward SDE systems.

The backward discretization estimates the control process through the linear
equation of the solution's Malliavin derivatives, producing (y, z, gamma)
estimates at every time level.  Two backends realize the arising conditional
expectations: a one-dimensional Fourier-cosine recursion (`bcos`) and a
neural least-squares Monte Carlo trainer (`deep`), with the classical
one-step Euler regression (`dbdp1`) as the comparison baseline.
"""

from .grids import BrownianBatch, TimeGrid, make_grid, sample_brownian
from .models import (
    FbsdeModel,
    make_example1,
    make_example2,
    make_example3,
    make_linear_abm,
    reference_solution,
)
from .riccati import RiccatiTable, lambda_root, solve_riccati
from .simulate import PathEnsemble, euler_maruyama, exact_paths
from .bcos import (
    BcosSolution,
    CosExpansion,
    CosInterval,
    bcos_solve,
    char_factor,
    cos_expectation,
    dct_coeffs,
)
from .deep import (
    DeepSolution,
    StageBatch,
    StageTriple,
    TrainConfig,
    dbdp1_solve,
    dy_estimate,
    loss_dbdp1,
    loss_y,
    loss_zd,
    loss_zgamma,
    osm_solve,
    terminal_stage,
)
from .bench import (
    ConvergenceTable,
    ErrorReport,
    convergence_study,
    evaluate_errors,
    fit_loglog_slope,
    sde_strong_errors,
    z_target_variances,
)
from .cli import run_experiment

__version__ = "0.1.0"

__all__ = [
    "TimeGrid", "BrownianBatch", "make_grid", "sample_brownian",
    "FbsdeModel", "make_example1", "make_example2", "make_example3",
    "make_linear_abm", "reference_solution",
    "RiccatiTable", "solve_riccati", "lambda_root",
    "PathEnsemble", "euler_maruyama", "exact_paths",
    "CosInterval", "CosExpansion", "BcosSolution", "dct_coeffs",
    "char_factor", "cos_expectation", "bcos_solve",
    "StageBatch", "StageTriple", "TrainConfig", "DeepSolution",
    "terminal_stage", "dy_estimate", "loss_zgamma", "loss_zd", "loss_y",
    "loss_dbdp1", "osm_solve", "dbdp1_solve",
    "ErrorReport", "ConvergenceTable", "evaluate_errors",
    "convergence_study", "fit_loglog_slope", "sde_strong_errors",
    "z_target_variances", "run_experiment",
]
