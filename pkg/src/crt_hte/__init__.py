"""Design cluster randomized trials for detecting heterogeneous treatment effects.

When every cluster has the same subgroup prevalence, the variance of the
treatment-by-subgroup interaction does not depend on the intraclass
correlation. This package computes the randomization factor psi, power and
required cluster sizes for such designs, and checks them by simulation.
"""

__version__ = "0.1.0"

from .design import (
    ClusterSizes,
    ModelParams,
    PsiEstimate,
    SubgroupSpec,
    TrialDesign,
    build_simulation_pattern,
    load_design,
    load_preset,
    validate_design,
)
from .errors import CrtHteError
from .power import (
    dropout_min_size,
    dropout_power,
    min_avg_cluster_size,
    power_chisq,
    power_wald_1d,
    solve_equalizer,
)
from .randomization import compute_psi, psi_approx, psi_exact, psi_sampled
from .simulate import generate_dataset, operating_characteristics
from .gls import fit_lmm, gls_given_rho

__all__ = [
    "ClusterSizes", "ModelParams", "PsiEstimate", "SubgroupSpec", "TrialDesign",
    "build_simulation_pattern", "load_design", "load_preset", "validate_design",
    "CrtHteError", "dropout_min_size", "dropout_power", "min_avg_cluster_size",
    "power_chisq", "power_wald_1d", "solve_equalizer", "compute_psi", "psi_approx",
    "psi_exact", "psi_sampled", "generate_dataset", "operating_characteristics",
    "fit_lmm", "gls_given_rho",
]
