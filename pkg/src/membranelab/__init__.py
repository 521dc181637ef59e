"""membranelab: two-membranes and obstacle problems for nonlocal operators.

Solves the constrained minimization of coupled membrane energies on the unit
ball for translation-invariant kernels of order 2s in (0, 2], cross-validates
several solvers against each other, and runs the regularity diagnostics that
the theory predicts: complementarity residuals, comparison principles,
free-boundary extraction, Holder-exponent fits, and the Almgren-type frequency
function of the weighted harmonic extension.
"""

from .grid_kernel import (
    Grid,
    GridFunction,
    KernelSpec,
    FractionalPower,
    PerturbedPower,
    LocalMatrix,
    DiscreteNonlocalOperator,
    build_operator,
    apply_operator,
    weighted_l2_norm,
    rescale_kernel,
)
from .energy import (
    ProblemSpec,
    MembranePair,
    ResidualReport,
    inner_product,
    total_energy,
    energy_gradient,
    el_residuals,
)
from .two_membranes import (
    Method,
    SolverConfig,
    SolveReport,
    project_admissible,
    solve_projected_gradient,
    solve_active_set,
    solve_viscosity_sweep,
    solve_two_membranes,
)
from .obstacle import (
    ObstacleProblemSpec,
    solve_obstacle,
    alternating_two_membranes,
    contact_set,
)
from .frequency import (
    ExtensionField,
    FrequencyParams,
    FrequencyReport,
    extend_solution,
    mollified_obstacle_extension,
    compute_frequency,
    classify_point,
)
from .diagnostics import (
    ExponentFit,
    free_boundary,
    estimate_exponent,
    refine_anchor,
    comparison_test,
)

__version__ = "0.1.0"

__all__ = [
    "Grid", "GridFunction", "KernelSpec", "FractionalPower", "PerturbedPower",
    "LocalMatrix", "DiscreteNonlocalOperator", "build_operator",
    "apply_operator", "weighted_l2_norm", "rescale_kernel",
    "ProblemSpec", "MembranePair", "ResidualReport", "inner_product",
    "total_energy", "energy_gradient", "el_residuals",
    "Method", "SolverConfig", "SolveReport", "project_admissible",
    "solve_projected_gradient", "solve_active_set", "solve_viscosity_sweep",
    "solve_two_membranes",
    "ObstacleProblemSpec", "solve_obstacle", "alternating_two_membranes",
    "contact_set",
    "ExtensionField", "FrequencyParams", "FrequencyReport", "extend_solution",
    "mollified_obstacle_extension", "compute_frequency", "classify_point",
    "ExponentFit", "free_boundary", "estimate_exponent", "refine_anchor",
    "comparison_test",
]
