"""Stationary distributions of upper block-Hessenberg Markov chains.

The solver builds last-block-column augmented truncations level by level,
picks the augmentation phase that minimizes a drift-based residual, and
stops when successive checkpoints agree in total variation.
"""

from .block_chain import (
    BlockGenerator,
    LevelVector,
    ValidationReport,
    finite_prefix,
    tail_weighted_sum,
    validate_generator,
)
from .bounds import (
    DriftCertificate,
    DriftReport,
    bmap_certificate,
    check_drift,
    compute_y,
    condition2_partial,
    counterexample_certificate,
    error_bound,
    mm1_certificate,
    residual,
    retrial_certificate,
)
from .errors import (
    CapabilityError,
    CertificateError,
    ContractError,
    HessolveError,
    ModelError,
    ModelFileError,
    NumericalBreakdown,
    QueryError,
    SpecError,
    StabilityError,
    StructuralError,
)
from .models import (
    BMAPSpec,
    CounterexampleSpec,
    RetrialSpec,
    bmap_generator,
    counterexample_generator,
    load_generator,
    load_model,
    mm1_generator,
    retrial_generator,
)
from .solver import (
    SolveResult,
    SolverState,
    TruncationSchedule,
    advance,
    approximation,
    init_state,
    optimal_alpha,
    run,
    run_fixed_alpha,
    tv_distance,
)

__version__ = "0.1.0"
