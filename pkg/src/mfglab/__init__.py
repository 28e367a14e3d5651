"""mfglab: a numerical laboratory for mean field games of controls.

Cost models with mean couplings and bounded smooth perturbations, exact
particle-cloud Wasserstein distances, best-response fixed points, Pontryagin
forward-backward solvers (mean-field and finite-player), linear-quadratic
closed forms, displacement-monotonicity estimation, and a convergence-rate
experiment harness with a CLI front end.
"""

from ._backend import BACKEND
from .config import ExperimentConfig, load_config, load_model
from .fbsde import (
    SchemeConfig,
    TruncatedGauss,
    UniformBox,
    generate_paths,
    solve_continuation,
    solve_meanfield,
    solve_nplayer,
)
from .fixedpoint import phi_an_discrepancy, solve_a_n, solve_phi
from .harness import fit_rate, run_closedloop_gap, run_openloop_convergence, write_report
from .lq import riccati_closedloop, riccati_meanfield, riccati_nplayer
from .measures import EmpiricalMeasure, fg_rate, wasserstein2
from .model import InteractionSpec, ModelSpec, SmoothTerm
from .monotonicity import certify, estimate_constants

__all__ = [
    "BACKEND",
    "EmpiricalMeasure",
    "ExperimentConfig",
    "InteractionSpec",
    "ModelSpec",
    "SchemeConfig",
    "SmoothTerm",
    "TruncatedGauss",
    "UniformBox",
    "certify",
    "estimate_constants",
    "fg_rate",
    "fit_rate",
    "generate_paths",
    "load_config",
    "load_model",
    "phi_an_discrepancy",
    "riccati_closedloop",
    "riccati_meanfield",
    "riccati_nplayer",
    "run_closedloop_gap",
    "run_openloop_convergence",
    "solve_a_n",
    "solve_continuation",
    "solve_meanfield",
    "solve_nplayer",
    "solve_phi",
    "wasserstein2",
    "write_report",
]

__version__ = "0.1.0"
