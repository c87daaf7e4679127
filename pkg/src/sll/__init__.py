"""Critical growth models at and near their scaling limit.

The package has three layers:

* exact numerics for the limiting objects (total-mass diffusion, canonical
  cluster measure, survival asymptotics) and for small critical systems
  (generation counts, total progeny, enumerated lattice trees);
* reproducible Monte Carlo engines for the lattice models themselves
  (branching random walk, oriented percolation, contact process);
* estimators that confront the two, with confidence intervals calibrated
  so that simulation and closed form must agree within stated tolerances.
"""

from sll.analytic import (
    ModelConstants,
    MomentSpec,
    OffspringLaw,
    certify_weak_bound,
    feller_transition_laplace,
    gw_joint_moments_exact,
    gw_survival_exact,
    kolmogorov_limit,
    predicted_conditional_moment,
    predicted_scaled_moment,
    sbm_conditional_moment,
    sbm_fourier_moment,
    sbm_mass_moment,
    sbm_survival,
    yaglom_mean,
)
from sll.kernel import SpreadOutKernel, build_uniform_kernel, kernel_from_mass
from sll.stats import MomentAccumulator, derive_seed, stream, wilson_interval

__version__ = "0.1.0"

# the layers below read __version__ at import time, so they come after it
from sll.models import (
    BranchingRandomWalkModel,
    ContactProcessModel,
    GaltonWatsonModel,
    OrientedPercolationModel,
)
from sll.estimators import (
    ConstantsWindows,
    NormalizationContext,
    calibrate_criticality,
    estimate_cluster_tail,
    estimate_conditional_moments,
    estimate_constants,
    estimate_fourier_rpoint,
    estimate_scaled_moments,
    estimate_survival_curve,
    estimate_yaglom,
    replicates_for_survivors,
)
from sll.lattice_trees import enumerate_lattice_trees, verify_self_repellence_lt
from sll.runner import (
    DEFAULT_SEED,
    SUITES,
    ExperimentConfig,
    RunRecord,
    run,
    run_check,
    verify_suite,
)

__all__ = [
    "BranchingRandomWalkModel",
    "ConstantsWindows",
    "ContactProcessModel",
    "DEFAULT_SEED",
    "ExperimentConfig",
    "GaltonWatsonModel",
    "ModelConstants",
    "MomentAccumulator",
    "MomentSpec",
    "NormalizationContext",
    "OffspringLaw",
    "OrientedPercolationModel",
    "RunRecord",
    "SUITES",
    "SpreadOutKernel",
    "build_uniform_kernel",
    "calibrate_criticality",
    "certify_weak_bound",
    "derive_seed",
    "enumerate_lattice_trees",
    "estimate_cluster_tail",
    "estimate_conditional_moments",
    "estimate_constants",
    "estimate_fourier_rpoint",
    "estimate_scaled_moments",
    "estimate_survival_curve",
    "estimate_yaglom",
    "feller_transition_laplace",
    "gw_joint_moments_exact",
    "gw_survival_exact",
    "kernel_from_mass",
    "kolmogorov_limit",
    "predicted_conditional_moment",
    "predicted_scaled_moment",
    "replicates_for_survivors",
    "run",
    "run_check",
    "sbm_conditional_moment",
    "sbm_fourier_moment",
    "sbm_mass_moment",
    "sbm_survival",
    "stream",
    "verify_suite",
    "verify_self_repellence_lt",
    "wilson_interval",
    "yaglom_mean",
    "__version__",
]
