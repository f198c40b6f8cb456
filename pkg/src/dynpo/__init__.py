"""Comonotone dynamic Pareto-optimal risk sharing with distortion-type
dynamic risk measures on sampled scenario paths."""

from .allocation import (
    AllocationProcess,
    RetentionFn,
    RetentionPeriod,
    RetentionSchedule,
    check_dir,
    check_ir_t,
    comonotone_improve,
    convex_order_leq,
    extract_retention,
    is_comonotone_process,
    retention_to_allocation,
)
from .distortion import (
    DistortionFn,
    Regime,
    RegimeDistortion,
    choquet,
    es_distortion,
    identity,
    intersect,
    mix,
)
from .dynrisk import PeriodSpec, RiskSpec, check_axioms, eval_dynamic, eval_one_step, risk_to_go
from .errors import (
    ConfigError,
    DomainError,
    DynPOError,
    InfeasibleError,
    IngestionError,
    OracleBoundError,
    ParameterError,
    ShapeError,
    UnsupportedError,
)
from .paretosolve import (
    SolveConfig,
    compose_expected_distortion,
    evaluate_myopic,
    solve_cdpo,
    solve_time_step,
    tail_assessment,
    verify_myopic_optimality,
)
from .scenario import (
    EmpiricalDist,
    SamplePathSet,
    ScenarioTree,
    empirical_survival,
    essinf,
    generate_exponential_chain,
    load_paths,
)

__all__ = [name for name in dir() if not name.startswith("_")]
