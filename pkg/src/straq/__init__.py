"""straq: approximate aggregate queries over multi-resolution stratified
samples, with per-query error or response-time bounds."""

from .catalog import (
    BLOCK_ROWS,
    BlockRef,
    Catalog,
    ColumnStats,
    FrequencyTable,
    Schema,
    TableHandle,
    load_manifest,
    persist_manifest,
)
from .errors import (
    DuplicateTableError,
    EstimationError,
    ManifestError,
    MissingSubgroupError,
    ParseError,
    PlanInfeasibleError,
    QueryError,
    SampleError,
    SchemaError,
    StraqError,
    TimeBoundError,
)
from .estimator import (
    AggregateSpec,
    ConfidenceSpec,
    GroupEstimate,
    PilotStats,
    StratumSummary,
    confidence_interval,
    estimate,
    estimate_density,
    estimate_rows,
    normal_quantile,
    required_rows,
    z_for_confidence,
)
from .frontend import QueryResult, repl, run
from .optimizer import (
    Candidate,
    QueryTemplate,
    SamplePlan,
    WorkloadProfile,
    coverage_of,
    extract_templates,
    generate_candidates,
    solve_plan,
)
from .parser import parse
from .query_ast import BoundedQuery, ErrorBound, TimeBound
from .runtime import (
    ErrorLatencyProfile,
    ReuseCache,
    build_error_profile,
    build_latency_profile,
    execute_with_reuse,
    lemma_bound_check,
    rewrite_disjunction,
    select_family,
)
from .sampling import (
    ColumnSet,
    LevelView,
    SampleFamily,
    UniformSample,
    build_family,
    build_uniform,
    family_store_cost,
    refresh_family,
    sample_at_level,
    zipf_overhead,
)

__version__ = "0.1.0"
