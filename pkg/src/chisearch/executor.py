"""Filter-verification query execution.

Every query shape (filter, top-k, aggregation) follows the same two-stage
pattern: first bracket each mask's value using only its index, deciding
from the brackets alone whether the mask is certainly out, certainly in,
or undecided; then load only the undecided masks and evaluate exactly.
Results are always identical to a full scan, the only difference is how
many masks were read from disk.

Engines run in one of three modes:

* ``indexed``   -- every targeted mask must have a prebuilt index.
* ``incremental`` -- masks without an index are loaded, evaluated exactly,
  and indexed on the spot for later queries in the session.
* ``oracle``    -- no index at all; loads everything. The correctness
  reference the other two modes are tested against.
"""

from __future__ import annotations

import heapq
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import bounds as bnd
from .bounds import (
    Bounds,
    CpTerm,
    Expr,
    bound_scalar_agg,
    exact_scalar_agg,
    expr_bounds,
    expr_exact,
)
from .chi import ChiIndex, IndexStore, build_chi, grid_boundaries
from .store import (
    MAX_PIXEL,
    DimensionMismatch,
    ManifestEntry,
    MaskMeta,
    MaskRecord,
    MaskStore,
    RoiBinding,
    ValueRange,
    cp_exact,
)


class ExecError(Exception):
    pass


class MissingIndex(ExecError):
    pass


# -- predicates --------------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    """One-sided comparison of a count expression against a threshold."""

    expr: Expr
    comparator: str  # '>' or '<'
    threshold: float

    def __post_init__(self):
        if self.comparator not in (">", "<"):
            raise ValueError(f"unsupported comparator {self.comparator!r}")


@dataclass(frozen=True)
class CpComparison:
    pred: Predicate


@dataclass(frozen=True)
class MetaComparison:
    """Comparison on a manifest column; decidable without any pixel I/O."""

    column: str  # mask_id | image_id | model_id | mask_type
    op: str  # '=' or 'in'
    values: tuple

    def holds(self, meta: MaskMeta) -> bool:
        v = getattr(meta, self.column)
        return v == self.values[0] if self.op == "=" else v in self.values


@dataclass(frozen=True)
class BoolOp:
    op: str  # 'and' | 'or'
    children: tuple


PredNode = Union[CpComparison, MetaComparison, BoolOp]

_TRUE, _FALSE, _UNKNOWN = 1, 0, -1


def _compare_bounds(b: Bounds, comparator: str, threshold: float) -> int:
    """Three-valued verdict from a bracket: certain pass, certain fail, or not yet."""
    if comparator == ">":
        if b.upper <= threshold:
            return _FALSE
        if b.lower > threshold:
            return _TRUE
    else:
        if b.upper < threshold:
            return _TRUE
        if b.lower >= threshold:
            return _FALSE
    return _UNKNOWN


def _combine(op: str, verdicts: Sequence[int]) -> int:
    if op == "and":
        if any(v == _FALSE for v in verdicts):
            return _FALSE
        if all(v == _TRUE for v in verdicts):
            return _TRUE
    else:
        if any(v == _TRUE for v in verdicts):
            return _TRUE
        if all(v == _FALSE for v in verdicts):
            return _FALSE
    return _UNKNOWN


# -- aggregation specs -------------------------------------------------------


@dataclass(frozen=True)
class MaskAggregate:
    """Pixelwise combination of a group's masks into one pseudo-mask."""

    kind: str  # 'intersect' | 'min' | 'max'
    threshold: float | None = None

    def fingerprint(self) -> tuple:
        return (self.kind, self.threshold)

    def apply(self, stack: np.ndarray) -> np.ndarray:
        if self.kind == "intersect":
            hit = np.all(stack > self.threshold, axis=0)
            return np.where(hit, np.float32(MAX_PIXEL), np.float32(0.0))
        if self.kind == "min":
            return np.min(stack, axis=0)
        if self.kind == "max":
            return np.max(stack, axis=0)
        raise ExecError(f"unknown mask aggregate {self.kind!r}")


MASK_AGG_REGISTRY: dict[str, object] = {}


def register_mask_agg(name: str, factory) -> None:
    """Register a MASK_AGG constructor for the query language."""
    MASK_AGG_REGISTRY[name.upper()] = factory


register_mask_agg("INTERSECT", lambda t: MaskAggregate("intersect", t))
register_mask_agg("MASK_MIN", lambda: MaskAggregate("min"))
register_mask_agg("MASK_MAX", lambda: MaskAggregate("max"))


@dataclass(frozen=True)
class ScalarAggSpec:
    fn: str  # SUM | AVG | MIN | MAX
    expr: Expr  # evaluated per member mask


@dataclass(frozen=True)
class MaskAggSpec:
    agg: MaskAggregate
    expr: Expr  # evaluated on the aggregated pseudo-mask


@dataclass(frozen=True)
class HavingCmp:
    comparator: str
    threshold: float


@dataclass(frozen=True)
class HavingBool:
    op: str  # 'and' | 'or'
    children: tuple


HavingNode = Union[HavingCmp, HavingBool]


def _having_verdict(node: HavingNode, b: Bounds) -> int:
    if isinstance(node, HavingCmp):
        return _compare_bounds(b, node.comparator, node.threshold)
    return _combine(node.op, [_having_verdict(c, b) for c in node.children])


def _having_exact(node: HavingNode, v: float) -> bool:
    if isinstance(node, HavingCmp):
        return v > node.threshold if node.comparator == ">" else v < node.threshold
    if node.op == "and":
        return all(_having_exact(c, v) for c in node.children)
    return any(_having_exact(c, v) for c in node.children)


# -- plans -------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSpec:
    pred: PredNode | None  # None accepts every targeted mask
    limit: int | None = None  # plain row-count cap, lowest ids first


@dataclass(frozen=True)
class TopKSpec:
    expr: Expr
    k: int | None  # None returns all targets, ordered
    descending: bool = True
    pred: PredNode | None = None  # optional exact filter on ranked masks


@dataclass(frozen=True)
class AggSpec:
    group_key: str  # 'image_id' | 'model_id'
    value: ScalarAggSpec | MaskAggSpec
    having: HavingNode | None = None
    descending: bool | None = None  # None: no ordering requested
    limit: int | None = None


@dataclass(frozen=True)
class Column:
    name: str


@dataclass(frozen=True)
class ExprItem:
    name: str
    expr: Expr


SelectItem = Union[Column, ExprItem]


@dataclass
class QueryPlan:
    target_ids: list[int]
    shape: Union[FilterSpec, TopKSpec, AggSpec]
    select: tuple[SelectItem, ...] | None = None
    verify_all: bool = False  # planner fallback when bounds cannot apply
    label: str = ""


@dataclass
class ExecStats:
    """Per-query accounting. The three buckets partition the targeted masks:
    a mask loaded for any reason (verification, incremental indexing, or
    output values) counts as loaded, never as pruned/accepted as well."""

    masks_targeted: int = 0
    masks_pruned: int = 0
    masks_accepted_directly: int = 0
    masks_loaded: int = 0
    phases: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def fml(self) -> float:
        if self.masks_targeted == 0:
            return 0.0
        return self.masks_loaded / self.masks_targeted

    def to_json(self) -> dict:
        return {
            "masks_targeted": self.masks_targeted,
            "masks_pruned": self.masks_pruned,
            "masks_accepted_directly": self.masks_accepted_directly,
            "masks_loaded": self.masks_loaded,
            "fml": self.fml,
            "phases": dict(self.phases),
            "warnings": list(self.warnings),
        }


@dataclass
class QueryResult:
    columns: list[str]
    rows: list[tuple]
    stats: ExecStats


# -- batched bound computation ----------------------------------------------
#
# For corpora of uniformly sized masks the per-mask bound arithmetic
# vectorizes: all index arrays share a grid shape, so they stack into one
# zero-padded block and the four-corner lookups become fancy indexing.


class _StackedIndexes:
    def __init__(self, index_store: IndexStore, width: int, height: int):
        config = index_store.config
        grid = grid_boundaries(width, height, config)
        self.width, self.height = width, height
        self.config = config
        self.n_cx, self.n_cy = len(grid.xs), len(grid.ys)
        ids = [
            mid
            for mid in index_store.mask_ids()
            if (index_store.get_or_absent(mid).width, index_store.get_or_absent(mid).height)
            == (width, height)
        ]
        self.row_of = {mid: i for i, mid in enumerate(ids)}
        b = config.bins
        padded = np.zeros(
            (len(ids), self.n_cx + 1, self.n_cy + 1, b + 1), dtype=np.int64
        )
        for i, mid in enumerate(ids):
            padded[i, 1:, 1:, :b] = index_store.get_or_absent(mid).counts
        self.padded = padded

    def _rank_x(self, v: np.ndarray) -> np.ndarray:
        return np.where(v == self.width, self.n_cx, v // self.config.cell_width)

    def _rank_y(self, v: np.ndarray) -> np.ndarray:
        return np.where(v == self.height, self.n_cy, v // self.config.cell_height)

    def _hist_at(self, rows, bx1, bx2, by1, by2, bin_idx) -> np.ndarray:
        p = self.padded
        return (
            p[rows, bx2, by2, bin_idx]
            - p[rows, bx1, by2, bin_idx]
            - p[rows, bx2, by1, bin_idx]
            + p[rows, bx1, by1, bin_idx]
        )

    def cp_bounds(self, rows: np.ndarray, rois: np.ndarray, rng: ValueRange):
        """Vectorized counterpart of bounds.cp_bounds over many masks.

        ``rois`` is an int array (n, 4) of x1, y1, x2, y2. Returns int64
        arrays (lower, upper).
        """
        cw, chh = self.config.cell_width, self.config.cell_height
        w, h = self.width, self.height
        x1, y1, x2, y2 = rois[:, 0], rois[:, 1], rois[:, 2], rois[:, 3]
        area = (x2 - x1) * (y2 - y1)

        ox1 = (x1 // cw) * cw
        oy1 = (y1 // chh) * chh
        ox2 = np.minimum(-(-x2 // cw) * cw, w)
        oy2 = np.minimum(-(-y2 // chh) * chh, h)
        ix1 = np.where(x1 == 0, 0, np.minimum(-(-x1 // cw) * cw, w))
        iy1 = np.where(y1 == 0, 0, np.minimum(-(-y1 // chh) * chh, h))
        ix2 = np.where(x2 == w, w, (x2 // cw) * cw)
        iy2 = np.where(y2 == h, h, (y2 // chh) * chh)
        empty = (ix1 >= ix2) | (iy1 >= iy2)
        inner_area = np.where(empty, 0, (ix2 - ix1) * (iy2 - iy1))

        obx1, obx2 = self._rank_x(ox1), self._rank_x(ox2)
        oby1, oby2 = self._rank_y(oy1), self._rank_y(oy2)
        # Empty inner regions contribute zero via the padded zero corner.
        ibx1 = np.where(empty, 0, self._rank_x(ix1))
        ibx2 = np.where(empty, 0, self._rank_x(ix2))
        iby1 = np.where(empty, 0, self._rank_y(iy1))
        iby2 = np.where(empty, 0, self._rank_y(iy2))

        lo, hi = self.config.outer_bin_span(rng)
        outer_wide = self._hist_at(rows, obx1, obx2, oby1, oby2, lo) - self._hist_at(
            rows, obx1, obx2, oby1, oby2, hi
        )
        inner_wide = self._hist_at(rows, ibx1, ibx2, iby1, iby2, lo) - self._hist_at(
            rows, ibx1, ibx2, iby1, iby2, hi
        )
        upper = np.minimum(np.minimum(outer_wide, inner_wide + area - inner_area), area)

        a, z = self.config.inner_bin_span(rng)
        if a >= z:
            lower = np.zeros(len(rows), dtype=np.int64)
        else:
            outer_area = (ox2 - ox1) * (oy2 - oy1)
            inner_narrow = self._hist_at(rows, ibx1, ibx2, iby1, iby2, a) - self._hist_at(
                rows, ibx1, ibx2, iby1, iby2, z
            )
            outer_narrow = self._hist_at(rows, obx1, obx2, oby1, oby2, a) - self._hist_at(
                rows, obx1, obx2, oby1, oby2, z
            )
            lower = np.maximum(
                np.maximum(inner_narrow, outer_narrow - (outer_area - area)), 0
            )
        return lower, upper


# -- the engine ---------------------------------------------------------------


class Engine:
    """Executes query plans against one mask store and (optionally) indexes."""

    def __init__(
        self,
        store: MaskStore,
        index_store: IndexStore | None = None,
        *,
        mode: str = "indexed",
        threads: int = 1,
        topk_by_upper_bound: bool = False,
    ):
        if mode not in ("indexed", "incremental", "oracle"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode != "oracle" and index_store is None:
            raise ValueError(f"mode {mode!r} requires an index store")
        self.store = store
        self.index_store = index_store
        self.mode = mode
        self.threads = max(1, threads)
        self.topk_by_upper_bound = topk_by_upper_bound
        self._agg_chi_cache: dict[tuple, ChiIndex] = {}
        self._stack_cache: dict[tuple[int, int], tuple[int, _StackedIndexes]] = {}

    # -- shared plumbing ---------------------------------------------------

    def execute(self, plan: QueryPlan) -> QueryResult:
        if isinstance(plan.shape, FilterSpec):
            return self.execute_filter(plan)
        if isinstance(plan.shape, TopKSpec):
            return self.execute_topk(plan)
        return self.execute_aggregation(plan)

    def _meta(self, mask_id: int) -> ManifestEntry:
        return self.store.get_meta(mask_id)

    def _index_of(self, mask_id: int) -> ChiIndex | None:
        if self.mode == "oracle":
            return None
        idx = self.index_store.get_or_absent(mask_id)
        if idx is None and self.mode == "indexed":
            raise MissingIndex(f"mask {mask_id} has no index and mode is 'indexed'")
        return idx

    def _stacked(self, width: int, height: int) -> _StackedIndexes:
        gen = self.index_store.generation
        cached = self._stack_cache.get((width, height))
        if cached is None or cached[0] != gen:
            stacked = _StackedIndexes(self.index_store, width, height)
            self._stack_cache[(width, height)] = (gen, stacked)
            return stacked
        return cached[1]

    def _prefetch(self, ctx: "_QueryCtx", mask_ids: Sequence[int]) -> None:
        todo = [m for m in dict.fromkeys(mask_ids) if m not in ctx.records]
        if not todo:
            return
        # Pool startup only pays off for real batches.
        if self.threads > 1 and len(todo) > 8:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                for _ in pool.map(ctx.load, todo):
                    pass
        else:
            for mid in todo:
                ctx.load(mid)

    # -- filter --------------------------------------------------------------

    def execute_filter(self, plan: QueryPlan) -> QueryResult:
        t_start = time.perf_counter()
        ctx = _QueryCtx(self)
        stats = ctx.stats
        targets = sorted(plan.target_ids)
        stats.masks_targeted = len(targets)
        if plan.verify_all:
            stats.warnings.append("predicate not index-boundable; verifying all masks")

        accepted: list[int] = []
        to_verify: list[int] = []
        if plan.shape.pred is None:
            accepted = list(targets)  # pure metadata scan
        elif self.mode == "oracle" or plan.verify_all:
            to_verify = list(targets)
        else:
            verdicts = self._filter_verdicts(ctx, plan.shape.pred, targets)
            for mid, v in zip(targets, verdicts):
                if v == _TRUE:
                    accepted.append(mid)
                elif v == _UNKNOWN:
                    to_verify.append(mid)
        t_filter = time.perf_counter()

        self._prefetch(ctx, to_verify)
        verified = [
            mid
            for mid in to_verify
            if self._pred_exact(ctx, plan.shape.pred, mid)
        ]
        result_ids = sorted(accepted + verified)
        if plan.shape.limit is not None:
            result_ids = result_ids[: plan.shape.limit]
        columns, rows = self._render_filter_rows(ctx, plan, result_ids)
        t_end = time.perf_counter()

        loaded = set(ctx.records)
        stats.masks_loaded = len(loaded)
        stats.masks_accepted_directly = sum(1 for m in accepted if m not in loaded)
        stats.masks_pruned = stats.masks_targeted - stats.masks_loaded - stats.masks_accepted_directly
        stats.phases = {
            "filter": t_filter - t_start,
            "verify": t_end - t_filter,
            "total": t_end - t_start,
        }
        return QueryResult(columns, rows, stats)

    def _filter_verdicts(
        self, ctx: "_QueryCtx", node: PredNode, targets: list[int]
    ) -> list[int]:
        """Three-valued verdict per target, from indexes and metadata only.

        In incremental mode masks without an index come back UNKNOWN, which
        routes them to the load-and-verify path where they get indexed.
        """
        present, absent = [], set()
        for mid in targets:
            if self._index_of(mid) is None:
                absent.add(mid)
            else:
                present.append(mid)

        verdict_by_id: dict[int, int] = {mid: _UNKNOWN for mid in absent}
        if present:
            arrs = self._node_verdicts_batch(ctx, node, present)
            verdict_by_id.update(zip(present, arrs))
        return [verdict_by_id[mid] for mid in targets]

    def _node_verdicts_batch(
        self, ctx: "_QueryCtx", node: PredNode, ids: list[int]
    ) -> np.ndarray:
        if isinstance(node, MetaComparison):
            return np.array(
                [_TRUE if node.holds(self._meta(m).meta) else _FALSE for m in ids],
                dtype=np.int8,
            )
        if isinstance(node, BoolOp):
            child = [self._node_verdicts_batch(ctx, c, ids) for c in node.children]
            stack = np.stack(child)
            out = np.full(len(ids), _UNKNOWN, dtype=np.int8)
            if node.op == "and":
                out[np.all(stack == _TRUE, axis=0)] = _TRUE
                out[np.any(stack == _FALSE, axis=0)] = _FALSE
            else:
                out[np.all(stack == _FALSE, axis=0)] = _FALSE
                out[np.any(stack == _TRUE, axis=0)] = _TRUE
            return out
        pred = node.pred
        lowers, uppers = self._expr_bounds_many(ctx, pred.expr, ids)
        out = np.full(len(ids), _UNKNOWN, dtype=np.int8)
        if pred.comparator == ">":
            out[uppers <= pred.threshold] = _FALSE
            out[lowers > pred.threshold] = _TRUE
        else:
            out[uppers < pred.threshold] = _TRUE
            out[lowers >= pred.threshold] = _FALSE
        return out

    def _expr_bounds_many(self, ctx: "_QueryCtx", expr: Expr, ids: list[int]):
        """(lower, upper) float arrays of ``expr`` for masks with indexes."""
        dims = {(self._meta(m).width, self._meta(m).height) for m in ids}
        if len(dims) == 1:
            width, height = next(iter(dims))
            stacked = self._stacked(width, height)
            if all(m in stacked.row_of for m in ids):
                rows = np.array([stacked.row_of[m] for m in ids])

                def term_bounds(term: CpTerm):
                    rois = self._resolve_rois(ids, term.roi)
                    lo, hi = stacked.cp_bounds(rows, rois, term.rng)
                    return lo.astype(np.float64), hi.astype(np.float64)

                def area_value(binding: RoiBinding):
                    rois = self._resolve_rois(ids, binding)
                    return ((rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1])).astype(
                        np.float64
                    )

                lo, hi = expr_bounds(expr, term_bounds, area_value)
                return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)

        lowers = np.empty(len(ids))
        uppers = np.empty(len(ids))
        for i, mid in enumerate(ids):
            b = self._expr_bounds_one(mid, expr)
            lowers[i], uppers[i] = b.lower, b.upper
        return lowers, uppers

    def _resolve_rois(self, ids: Sequence[int], binding: RoiBinding) -> np.ndarray:
        if binding.kind in ("constant", "full") and ids:
            e = self._meta(ids[0])
            r = binding.resolve(ids[0], e.width, e.height)
            r.check_within(e.width, e.height)
            return np.tile(
                np.array([r.x1, r.y1, r.x2, r.y2], dtype=np.int64), (len(ids), 1)
            )
        out = np.empty((len(ids), 4), dtype=np.int64)
        for i, mid in enumerate(ids):
            e = self._meta(mid)
            r = binding.resolve(mid, e.width, e.height)
            r.check_within(e.width, e.height)
            out[i] = (r.x1, r.y1, r.x2, r.y2)
        return out

    def _expr_bounds_one(self, mask_id: int, expr: Expr) -> Bounds:
        idx = self._index_of(mask_id)
        e = self._meta(mask_id)

        def term_bounds(term: CpTerm):
            roi = term.roi.resolve(mask_id, e.width, e.height)
            roi.check_within(e.width, e.height)
            b = bnd.cp_bounds(idx, roi, term.rng)
            return (float(b.lower), float(b.upper))

        def area_value(binding: RoiBinding):
            return float(binding.resolve(mask_id, e.width, e.height).area)

        lo, hi = expr_bounds(expr, term_bounds, area_value)
        return Bounds(float(lo), float(hi))

    def _expr_exact_for(self, ctx: "_QueryCtx", mask_id: int, expr: Expr) -> float:
        rec = ctx.record(mask_id)
        if type(expr) is CpTerm:  # the common single-count case, kept lean
            return cp_exact(rec, expr.roi.resolve(mask_id, rec.width, rec.height), expr.rng)

        def term_exact(term: CpTerm):
            roi = term.roi.resolve(mask_id, rec.width, rec.height)
            return cp_exact(rec, roi, term.rng)

        def area_value(binding: RoiBinding):
            return float(binding.resolve(mask_id, rec.width, rec.height).area)

        return expr_exact(expr, term_exact, area_value)

    def _pred_exact(self, ctx: "_QueryCtx", node: PredNode, mask_id: int) -> bool:
        if isinstance(node, MetaComparison):
            return node.holds(self._meta(mask_id).meta)
        if isinstance(node, BoolOp):
            results = (self._pred_exact(ctx, c, mask_id) for c in node.children)
            return all(results) if node.op == "and" else any(results)
        pred = node.pred
        v = self._expr_exact_for(ctx, mask_id, pred.expr)
        return v > pred.threshold if pred.comparator == ">" else v < pred.threshold

    def _render_filter_rows(self, ctx, plan, result_ids):
        items = plan.select or (Column("mask_id"),)
        columns = [it.name for it in items]
        rows = []
        for mid in result_ids:
            meta = self._meta(mid).meta
            row = []
            for it in items:
                if isinstance(it, Column):
                    row.append(getattr(meta, it.name))
                else:
                    row.append(self._expr_exact_for(ctx, mid, it.expr))
            rows.append(tuple(row))
        return columns, rows

    # -- top-k ---------------------------------------------------------------

    def _topk_threshold(self, heap: list, k: int, descending: bool) -> float:
        """The value a candidate must strictly beat; overridable for fault
        injection (a stale threshold may only cause extra loads)."""
        if len(heap) < k:
            return -np.inf if descending else np.inf
        v = heap[0][0]
        return v if descending else -v

    def execute_topk(self, plan: QueryPlan) -> QueryResult:
        t_start = time.perf_counter()
        ctx = _QueryCtx(self)
        stats = ctx.stats
        spec: TopKSpec = plan.shape
        targets = sorted(plan.target_ids)
        stats.masks_targeted = len(targets)
        k = spec.k if spec.k is not None else len(targets)
        k = min(k, len(targets))
        if k == 0:
            stats.phases = {"filter": 0.0, "verify": 0.0, "total": 0.0}
            columns, rows = self._render_value_rows(ctx, plan, [], "mask")
            return QueryResult(columns, rows, stats)

        bound_of: dict[int, float] = {}
        pred_verdicts: dict[int, int] = {}
        candidates = targets
        if self.mode != "oracle" and not plan.verify_all:
            if spec.pred is not None:
                verdicts = self._filter_verdicts(ctx, spec.pred, targets)
                pred_verdicts = dict(zip(targets, verdicts))
                candidates = [m for m in targets if pred_verdicts[m] != _FALSE]
            present = [m for m in candidates if self._index_of(m) is not None]
            if present:
                lowers, uppers = self._expr_bounds_many(ctx, spec.expr, present)
                edge = uppers if spec.descending else lowers
                bound_of = dict(zip(present, edge))
        t_filter = time.perf_counter()

        if self.mode == "oracle":
            self._prefetch(ctx, candidates)  # everything loads anyway

        order = candidates
        if self.topk_by_upper_bound and bound_of:
            sign = -1 if spec.descending else 1
            order = sorted(candidates, key=lambda m: (sign * bound_of.get(m, sign * np.inf), m))

        # Min-heap over (value, -id) keeps, among equal boundary values, the
        # lower ids; candidates must strictly beat the boundary to enter.
        heap: list[tuple[float, int]] = []
        for mid in order:
            threshold = self._topk_threshold(heap, k, spec.descending)
            edge = bound_of.get(mid)
            if edge is not None and len(heap) >= k:
                if spec.descending and edge <= threshold:
                    continue
                if not spec.descending and edge >= threshold:
                    continue
            if spec.pred is not None and pred_verdicts.get(mid, _UNKNOWN) != _TRUE:
                if not self._pred_exact(ctx, spec.pred, mid):
                    continue
            v = float(self._expr_exact_for(ctx, mid, spec.expr))
            key = (v, -mid) if spec.descending else (-v, -mid)
            if len(heap) < k:
                heapq.heappush(heap, key)
            else:
                boundary = self._topk_threshold(heap, k, spec.descending)
                if (spec.descending and v > boundary) or (
                    not spec.descending and v < boundary
                ):
                    heapq.heapreplace(heap, key)
        t_end = time.perf_counter()

        ranked = [(v if spec.descending else -v, -nid) for v, nid in heap]
        ranked.sort(key=lambda t: (-t[0], t[1]) if spec.descending else (t[0], t[1]))
        columns, rows = self._render_value_rows(ctx, plan, ranked, "mask")
        stats.masks_loaded = len(ctx.records)
        stats.masks_pruned = stats.masks_targeted - stats.masks_loaded
        stats.phases = {
            "filter": t_filter - t_start,
            "verify": t_end - t_filter,
            "total": t_end - t_start,
        }
        return QueryResult(columns, rows, stats)

    def _render_value_rows(self, ctx, plan, ranked, kind: str):
        """Rows for ranked (value, id) pairs; id is a mask or a group key."""
        value_name = "value"
        extra_cols: list[SelectItem] = []
        if plan.select:
            for it in plan.select:
                if isinstance(it, ExprItem):
                    value_name = it.name
                else:
                    extra_cols.append(it)
        else:
            extra_cols = [Column("mask_id" if kind == "mask" else "group")]
        columns = [c.name for c in extra_cols] + [value_name]
        rows = []
        for v, ident in ranked:
            row = []
            for c in extra_cols:
                if kind == "mask":
                    row.append(
                        ident if c.name == "mask_id" else getattr(self._meta(ident).meta, c.name)
                    )
                else:
                    row.append(ident)
            row.append(v)
            rows.append(tuple(row))
        return columns, rows

    # -- aggregation -----------------------------------------------------------

    def execute_aggregation(self, plan: QueryPlan) -> QueryResult:
        t_start = time.perf_counter()
        ctx = _QueryCtx(self)
        stats = ctx.stats
        spec: AggSpec = plan.shape
        targets = sorted(plan.target_ids)
        stats.masks_targeted = len(targets)

        groups: dict[int, list[int]] = {}
        for mid in targets:
            key = getattr(self._meta(mid).meta, spec.group_key)
            groups.setdefault(key, []).append(mid)
        keys = sorted(groups)

        if self.mode == "oracle":
            self._prefetch(ctx, targets)  # everything loads anyway
        group_bounds = self._group_bounds(ctx, spec, groups, keys)
        t_filter = time.perf_counter()

        survivors: list[int] = []
        unknown: list[int] = []  # having verdict needs exact values
        for key in keys:
            if spec.having is None:
                survivors.append(key)
                continue
            b = group_bounds.get(key)
            verdict = _having_verdict(spec.having, b) if b is not None else _UNKNOWN
            if verdict == _FALSE:
                continue  # whole group pruned
            (survivors if verdict == _TRUE else unknown).append(key)

        ranked_query = spec.limit is not None or spec.descending is not None
        if not ranked_query:
            # Plain grouped output: resolve unknown having groups exactly.
            final = list(survivors)
            for key in unknown:
                v = self._group_exact(ctx, spec, key, groups[key])
                if _having_exact(spec.having, v):
                    final.append(key)
            final.sort()
            if self._select_wants_value(plan):
                ranked = [
                    (self._group_exact(ctx, spec, key, groups[key]), key) for key in final
                ]
                columns, rows = self._render_group_rows(plan, spec, ranked, True)
            else:
                columns, rows = self._render_group_rows(
                    plan, spec, [(0.0, key) for key in final], False
                )
            accepted_keys = set(final)
        else:
            # Ranked groups: three-case dispatch against the evolving boundary.
            descending = True if spec.descending is None else spec.descending
            k = spec.limit if spec.limit is not None else len(groups)
            candidates = sorted(survivors + unknown)
            needs_exact_having = set(unknown)
            heap: list[tuple[float, int]] = []
            for key in candidates:
                threshold = self._topk_threshold(heap, k, descending)
                b = group_bounds.get(key)
                if b is not None and len(heap) >= k:
                    if descending and b.upper <= threshold:
                        continue
                    if not descending and b.lower >= threshold:
                        continue
                v = self._group_exact(ctx, spec, key, groups[key])
                if key in needs_exact_having and not _having_exact(spec.having, v):
                    continue
                keyed = (v, -key) if descending else (-v, -key)
                if len(heap) < k:
                    heapq.heappush(heap, keyed)
                else:
                    boundary = self._topk_threshold(heap, k, descending)
                    if (descending and v > boundary) or (not descending and v < boundary):
                        heapq.heapreplace(heap, keyed)
            ranked = [(v if descending else -v, -nk) for v, nk in heap]
            ranked.sort(key=lambda t: (-t[0], t[1]) if descending else (t[0], t[1]))
            columns, rows = self._render_group_rows(plan, spec, ranked, True)
            accepted_keys = set()
        t_end = time.perf_counter()

        loaded = set(ctx.records)
        stats.masks_loaded = len(loaded)
        # Ranked queries have no accept-without-load case; plain having
        # filters do, for groups certain to pass that were never loaded.
        stats.masks_accepted_directly = sum(
            1 for key in accepted_keys for m in groups[key] if m not in loaded
        )
        stats.masks_pruned = (
            stats.masks_targeted - stats.masks_loaded - stats.masks_accepted_directly
        )
        stats.phases = {
            "filter": t_filter - t_start,
            "verify": t_end - t_filter,
            "total": t_end - t_start,
        }
        return QueryResult(columns, rows, stats)

    def _select_wants_value(self, plan: QueryPlan) -> bool:
        if plan.select is None:
            return True
        return any(isinstance(it, ExprItem) for it in plan.select)

    def _render_group_rows(self, plan, spec, ranked, with_value: bool):
        value_name = "value"
        key_name = spec.group_key
        if plan.select:
            for it in plan.select:
                if isinstance(it, ExprItem):
                    value_name = it.name
        if not with_value:
            return [key_name], [(key,) for _, key in ranked]
        return [key_name, value_name], [(key, v) for v, key in ranked]

    def warm_mask_agg_cache(self, plan: QueryPlan) -> int:
        """Build the aggregated-mask indexes for a grouped plan ahead of time.

        Pseudo-mask indexes can be built before measured runs, exactly like
        per-mask indexes; without this, the first execution of a mask
        aggregation pays one full materialization per group. Returns the
        number of groups indexed.
        """
        spec = plan.shape
        if not isinstance(spec, AggSpec) or not isinstance(spec.value, MaskAggSpec):
            raise ExecError("plan has no mask aggregation to warm")
        ctx = _QueryCtx(self)
        groups: dict[int, list[int]] = {}
        for mid in sorted(plan.target_ids):
            key = getattr(self._meta(mid).meta, spec.group_key)
            groups.setdefault(key, []).append(mid)
        built = 0
        for key in sorted(groups):
            members = groups[key]
            fp = self._agg_fingerprint(spec.value, members)
            if fp in self._agg_chi_cache:
                continue
            pseudo = self._materialize_group(ctx, spec.value, key, members)
            self._agg_chi_cache[fp] = build_chi(pseudo, self.index_store.config)
            built += 1
        return built

    def _group_bounds(self, ctx, spec: AggSpec, groups, keys) -> dict[int, Bounds]:
        """Bracket each group's aggregate without loading where possible."""
        out: dict[int, Bounds] = {}
        if self.mode == "oracle":
            return out
        if isinstance(spec.value, ScalarAggSpec):
            member_ids = [m for key in keys for m in groups[key]]
            present = [m for m in member_ids if self._index_of(m) is not None]
            present_set = set(present)
            absent = [m for m in member_ids if m not in present_set]
            bounds_of: dict[int, Bounds] = {}
            if present:
                lowers, uppers = self._expr_bounds_many(ctx, spec.value.expr, present)
                for m, lo, hi in zip(present, lowers, uppers):
                    bounds_of[m] = Bounds(float(lo), float(hi))
            if absent and self.mode == "incremental":
                # Index-less members get loaded (and indexed) right away;
                # their exact values enter the group bracket as points.
                self._prefetch(ctx, absent)
                for m in absent:
                    v = float(self._expr_exact_for(ctx, m, spec.value.expr))
                    bounds_of[m] = Bounds(v, v)
            for key in keys:
                members = groups[key]
                if all(m in bounds_of for m in members):
                    out[key] = bound_scalar_agg(
                        spec.value.fn, [bounds_of[m] for m in members]
                    )
        else:
            for key in keys:
                fp = self._agg_fingerprint(spec.value, groups[key])
                idx = self._agg_chi_cache.get(fp)
                if idx is not None:
                    out[key] = self._pseudo_bounds(idx, spec.value.expr, groups[key])
        return out

    def _agg_fingerprint(self, spec: MaskAggSpec, members: list[int]) -> tuple:
        return spec.agg.fingerprint() + (tuple(sorted(members)),)

    def _materialize_group(self, ctx, spec: MaskAggSpec, key, members) -> MaskRecord:
        self._prefetch(ctx, members)
        recs = [ctx.record(m) for m in sorted(members)]
        dims = {(r.width, r.height) for r in recs}
        if len(dims) != 1:
            raise DimensionMismatch(f"group {key} mixes mask dimensions {dims}")
        stack = np.stack([r.pixels for r in recs])
        agg_pixels = spec.agg.apply(stack).astype(np.float32)
        rep = recs[0]
        return MaskRecord(
            MaskMeta(rep.mask_id, key, 0, 0), rep.width, rep.height, agg_pixels
        )

    def _pseudo_bounds(self, idx: ChiIndex, expr: Expr, members: list[int]) -> Bounds:
        rep = min(members)
        e = self._meta(rep)

        def term_bounds(term: CpTerm):
            roi = term.roi.resolve(rep, e.width, e.height)
            roi.check_within(e.width, e.height)
            b = bnd.cp_bounds(idx, roi, term.rng)
            return (float(b.lower), float(b.upper))

        def area_value(binding: RoiBinding):
            return float(binding.resolve(rep, e.width, e.height).area)

        lo, hi = expr_bounds(expr, term_bounds, area_value)
        return Bounds(float(lo), float(hi))

    def _group_exact(self, ctx, spec: AggSpec, key, members: list[int]) -> float:
        cached = ctx.group_values.get(key)
        if cached is not None:
            return cached
        if isinstance(spec.value, ScalarAggSpec):
            self._prefetch(ctx, members)
            values = [
                float(self._expr_exact_for(ctx, m, spec.value.expr)) for m in members
            ]
            v = float(exact_scalar_agg(spec.value.fn, values))
        else:
            pseudo = self._materialize_group(ctx, spec.value, key, members)
            if self.mode != "oracle":
                fp = self._agg_fingerprint(spec.value, members)
                if fp not in self._agg_chi_cache:
                    self._agg_chi_cache[fp] = build_chi(pseudo, self.index_store.config)
            rep = min(members)

            def term_exact(term: CpTerm):
                roi = term.roi.resolve(rep, pseudo.width, pseudo.height)
                return cp_exact(pseudo, roi, term.rng)

            def area_value(binding: RoiBinding):
                return float(binding.resolve(rep, pseudo.width, pseudo.height).area)

            v = float(expr_exact(spec.value.expr, term_exact, area_value))
        ctx.group_values[key] = v
        return v


class _QueryCtx:
    """Per-query scratch: loaded records (each mask at most once) and stats."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self.stats = ExecStats()
        self.records: dict[int, MaskRecord] = {}
        self.group_values: dict[int, float] = {}
        self._lock = threading.Lock()

    def load(self, mask_id: int) -> MaskRecord:
        rec = self.engine.store.get_mask(mask_id)
        if (
            self.engine.mode == "incremental"
            and self.engine.index_store.get_or_absent(mask_id) is None
        ):
            self.engine.index_store.insert(build_chi(rec, self.engine.index_store.config))
        with self._lock:
            self.records[mask_id] = rec
        return rec

    def record(self, mask_id: int) -> MaskRecord:
        rec = self.records.get(mask_id)
        if rec is None:
            rec = self.load(mask_id)
        return rec


def execute_incremental(
    plan: QueryPlan, store: MaskStore, index_store: IndexStore, **kwargs
) -> tuple[QueryResult, IndexStore]:
    """Run one plan in incremental mode; the store gains indexes as a side effect."""
    engine = Engine(store, index_store, mode="incremental", **kwargs)
    return engine.execute(plan), index_store
