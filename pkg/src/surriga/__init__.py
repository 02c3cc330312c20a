"""Standard and surrogate Galerkin assembly for isogeometric discretizations.

The package assembles B-spline and NURBS system matrices two ways: standard
element-wise Gauss quadrature, and a surrogate path that samples the smooth
stencil functions of translation-related basis pairs on a coarse lattice and
interpolates the remaining entries.  Study drivers compare both paths on
Poisson, membrane eigenvalue, plate bending and Stokes problems.
"""

from .bspline import (
    TensorSpace,
    UniformOpenKnotVector,
    cardinal_midpoints,
    greville_points,
    make_open_uniform_knots,
    make_tensor_space,
    marsden_check,
)
from .geometry import (
    BUILTIN_NAMES,
    GeometryMap,
    builtin_domain,
    coons_2d,
    load_geometry,
    map_grid,
    quarter_annulus,
    save_geometry,
    trivariate_polynomial_3d,
    unit_cube,
    unit_square,
    weight_function_grid,
)
from .assembly import (
    Discretization,
    FormKind,
    SparseMatrix,
    StokesSpaces,
    apply_dirichlet,
    assemble,
    assemble_divergence,
    assemble_load,
    boundary_values,
    dirichlet_dofs,
    evaluate_field,
    interpolate_field,
    load_matrix_market,
    make_discretization,
    pressure_mean_vector,
    save_matrix_market,
    stokes_subgrid_spaces,
)
from .surrogate import (
    AssemblyReport,
    ConstantSampling,
    MeshDependentSampling,
    SamplingLattice,
    SurrogateMode,
    SurrogatePlan,
    build_offsets,
    build_sampling_lattice,
    build_surrogate_divergence,
    build_surrogate_matrix,
    mesh_dependent_M,
    stencil_consistency_error,
    surrogate_plan,
    tilde_domain,
)
from .solvers import SolveOptions, solve_generalized_eig, solve_spd, solve_stokes
from .studies import (
    ErrorNorms,
    ManufacturedCase,
    StokesCase,
    StudyRow,
    error_norms,
    fit_rate,
    rate_last,
    run_biharmonic_study,
    run_cavity_flow,
    run_eigen_study,
    run_poisson_study,
    run_stokes_study,
    timing_harness,
)
from .cli import StudyConfig, parse_config, run

__version__ = "0.1.0"
