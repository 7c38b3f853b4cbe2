"""Embedded query engine over databases of dense float image masks.

Counts of pixels inside a rectangle and value range are the query
primitive; a per-mask cumulative histogram index brackets those counts so
filter, top-k, and aggregation queries can skip loading most masks.
"""

from .store import (
    MaskMeta,
    MaskRecord,
    MaskStore,
    Roi,
    RoiBinding,
    ValueRange,
    cp_exact,
)
from .chi import (
    ChiConfig,
    ChiIndex,
    IndexStore,
    build_chi,
    grid_boundaries,
    is_available_region,
    load_index,
    merge_index,
    persist_index,
    region_histogram,
)
from .bounds import (
    AreaTerm,
    BinOp,
    Bounds,
    Const,
    CpTerm,
    SnappedRegions,
    bound_scalar_agg,
    cp_bounds,
    expr_bounds,
    expr_exact,
    lower_bound,
    snap_regions,
    upper_bound,
)
from .executor import (
    AggSpec,
    BoolOp,
    CpComparison,
    Engine,
    ExecStats,
    FilterSpec,
    MaskAggSpec,
    MaskAggregate,
    MetaComparison,
    Predicate,
    QueryPlan,
    QueryResult,
    ScalarAggSpec,
    TopKSpec,
    execute_incremental,
    register_mask_agg,
)
from .sql import ParseError, parse, pretty
from .planner import PlanError, plan
from .corpus import generate_corpus

__version__ = "0.1.0"

__all__ = [
    "AggSpec", "AreaTerm", "BinOp", "BoolOp", "Bounds", "ChiConfig", "ChiIndex",
    "Const", "CpComparison", "CpTerm", "Engine", "ExecStats", "FilterSpec",
    "IndexStore", "MaskAggSpec", "MaskAggregate", "MaskMeta", "MaskRecord",
    "MaskStore", "MetaComparison", "ParseError", "PlanError", "Predicate",
    "QueryPlan", "QueryResult", "Roi", "RoiBinding", "ScalarAggSpec",
    "SnappedRegions", "TopKSpec", "ValueRange", "bound_scalar_agg", "build_chi",
    "cp_bounds", "cp_exact", "execute_incremental", "expr_bounds", "expr_exact",
    "generate_corpus", "grid_boundaries", "is_available_region", "load_index",
    "lower_bound", "merge_index", "parse", "persist_index", "plan", "pretty",
    "region_histogram", "register_mask_agg", "snap_regions", "upper_bound",
]
