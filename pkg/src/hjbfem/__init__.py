"""Monotone P1 finite element toolkit for degenerate parabolic Bellman equations.

The package builds and audits a backward-in-time finite element scheme for
final-value problems of the form

    -dv/dt + sup_alpha ( -a Lap v + b . grad v + c v - f ) = 0

with possibly vanishing diffusion, homogeneous lateral boundary values, and a
finite sample of the control set.  Advection and reaction are made monotone
by nodal artificial-diffusion floors on strictly acute meshes; the resulting
sign structure is certified by explicit audits instead of being assumed.
Diagnostics cover weighted space-time gradient norms, a positivity-preserving
cut-off projection, a discrete coercivity inequality, and convergence
studies across refinement levels.
"""

from .mesh import (
    Mesh, HatData, MeshError, generate_structured_mesh, mesh_from_arrays,
    check_strict_acuteness, compute_hat_data, nodal_interpolate, load_mesh,
    save_mesh, locate_points,
)
from .controls import (
    ControlProblem, CoefficientExpr, ExpressionError, EvaluationError,
    ProblemFormatError, parse_coefficient, parse_problem_text, problem_to_text,
    load_problem, validate_problem,
)
from .assembly import (
    DiscreteOperatorSet, AssemblyError, assemble_operators,
    compute_artificial_diffusion, apply_diffusion_floors, simplex_quadrature,
    export_triplets, export_nu_table,
)
from .monotonicity import (
    MonotonicityReport, audit_explicit, audit_implicit, audit_implicit_randomized,
    compute_h_max, run_audits,
)
from .stepping import (
    TimeGrid, SpaceTimeSolution, RunLog, SolverError, make_time_grid,
    resolve_time_grid, solve, solve_linear_control, boundary_control_diagnostic,
)
from .analysis import (
    WeightSpec, ErrorTable, cutoff, project_Q, weighted_h1_seminorm,
    weight_from_problem, compute_cprime, check_coercivity,
    coercivity_property_run, stability_bound_report, audit_sobolev_conditions,
    error_study, solve_on_level,
)
from .cli import builtin_problems, main

__version__ = "0.1.0"
