"""Identification of a potential and an interior source for the 1D fractional
Schrödinger equation from exterior measurements."""

from .errors import ConfigError, FracInvError, GridError, OracleError, SolverError
from .field import (
    ExteriorData,
    FieldSolution,
    InteriorSystem,
    Medium,
    bump_cutoff,
    exterior_trace,
    mollified_source,
    solve_adjoint,
    solve_sensitivity,
    solve_state,
)
from .harness import (
    ExperimentConfig,
    build_setup,
    example_config,
    emit_outputs,
    forward_run,
    gradient_check,
    load_config,
    run_example,
    run_experiment,
    synthesize_observation,
)
from .inverse import (
    CGConfig,
    CGResult,
    IterationRecord,
    Observation,
    conjugate_coefficient,
    descent_direction,
    eval_functional,
    eval_gradient,
    reconstruct,
    step_size,
)
from .lattice import (
    CoercivityReport,
    FracLapOp,
    GridSpec,
    RegionIndex,
    apply_fraclap,
    assemble_operator,
    build_grid,
    check_coercivity,
    fcd_weights,
    fraclap_constant,
    oracle_fraclap,
)

__version__ = "0.1.0"
