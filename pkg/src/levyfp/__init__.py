"""Forward (Fokker-Planck) operators for Levy-driven SDEs on truncated grids.

The package assembles the generator split L = A_r + I_r + J_r together with
its adjoint, where the large-jump part J_r is produced purely as the
transpose of the discretized adjoint J_r*, and provides implicit Euler
evolution, dissipativity certification, and a Monte Carlo cross-check.
"""

import os

# Pin BLAS thread pools before numpy is imported anywhere in the package;
# the sparse kernels are memory bound and oversubscription only adds noise
# to timing-sensitive runs.
_threads = os.environ.get("LEVYFP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del _threads

from .model import (
    CoefficientError,
    MeasureError,
    LevyMeasure,
    RadialDensity,
    SdeModel,
    build_model,
    measure_from_config,
    model_from_config,
    model_jacobian,
    validate_model,
)
from .inverse_flow import (
    InvertibilityError,
    NonContractionError,
    admissible_radius,
    compute_m,
    lemma_suite,
    solve_inverse,
    solve_inverse_batch,
)
from .quadrature import (
    MomentDivergenceError,
    QuadratureSplit,
    ResolutionError,
    split_measure,
    tail_mass,
    truncated_moment,
)
from .operators import (
    Grid,
    GridFunction,
    OperatorError,
    SparseOperator,
    assemble_Ar,
    assemble_Ar_star,
    assemble_Ir,
    assemble_Ir_star,
    assemble_Jr,
    assemble_Jr_star,
    assemble_full,
    drift_correction,
    dump_density,
    duality_gap,
)
from .semigroup import (
    DissipativityReport,
    EvolutionReport,
    SolverError,
    SupportMarginError,
    dissipativity_check,
    duality_set_pairing,
    evolve,
    gaussian_density,
    random_bumps,
    step_implicit_euler,
)
from .mc_oracle import (
    McConfig,
    SampleSet,
    SimulationError,
    gaussian_x0,
    kde_density,
    l1_distance,
    point_x0,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "CoefficientError", "MeasureError", "LevyMeasure", "RadialDensity",
    "SdeModel", "build_model", "measure_from_config", "model_from_config",
    "model_jacobian", "validate_model",
    "InvertibilityError", "NonContractionError", "admissible_radius",
    "compute_m", "lemma_suite", "solve_inverse", "solve_inverse_batch",
    "MomentDivergenceError", "QuadratureSplit", "ResolutionError",
    "split_measure", "tail_mass", "truncated_moment",
    "Grid", "GridFunction", "OperatorError", "SparseOperator",
    "assemble_Ar", "assemble_Ar_star", "assemble_Ir", "assemble_Ir_star",
    "assemble_Jr", "assemble_Jr_star", "assemble_full", "drift_correction",
    "dump_density", "duality_gap",
    "DissipativityReport", "EvolutionReport", "SolverError",
    "SupportMarginError", "dissipativity_check", "duality_set_pairing",
    "evolve", "gaussian_density", "random_bumps", "step_implicit_euler",
    "McConfig", "SampleSet", "SimulationError", "gaussian_x0", "kde_density",
    "l1_distance", "point_x0", "simulate",
]
