"""Turn parsed queries into executable plans against a mask store.

Responsibilities: resolve the view and columns, fold metadata-only WHERE
conjuncts into the target-id prefilter, convert count calls into bound
terms (validating value ranges and converting the dialect's 1-based
inclusive corner pairs to internal 0-based half-open rectangles), classify
the query shape, and check at plan time that predicates are boundable --
unboundable ones fall back to verifying every mask, with a warning.
"""

from __future__ import annotations

from typing import Mapping

from . import sql
from .bounds import (
    AreaTerm,
    BinOp,
    Const,
    CpTerm,
    Expr,
    NonMonotoneOperator,
    is_boundable,
)
from .executor import (
    AggSpec,
    BoolOp,
    Column,
    CpComparison,
    ExprItem,
    FilterSpec,
    HavingBool,
    HavingCmp,
    MASK_AGG_REGISTRY,
    MaskAggSpec,
    MetaComparison,
    Predicate,
    QueryPlan,
    ScalarAggSpec,
    TopKSpec,
)
from .store import MaskStore, Roi, RoiBinding, ValueRange

VIEW_NAME = "masksdatabaseview"
META_COLUMNS = ("mask_id", "image_id", "model_id", "mask_type")
GROUP_KEYS = ("image_id", "model_id")


class PlanError(Exception):
    pass


class UnknownColumn(PlanError):
    pass


class MissingRoiTable(PlanError):
    pass


def _contains_cp(node) -> bool:
    if isinstance(node, sql.CpCall):
        return True
    if isinstance(node, sql.Arith):
        return _contains_cp(node.left) or _contains_cp(node.right)
    if isinstance(node, sql.ScalarAggCall):
        return _contains_cp(node.arg)
    if isinstance(node, sql.Compare):
        return _contains_cp(node.left) or _contains_cp(node.right)
    if isinstance(node, sql.BoolExpr):
        return any(_contains_cp(i) for i in node.items)
    return False


def _contains_agg(node) -> bool:
    if isinstance(node, sql.ScalarAggCall):
        return True
    if isinstance(node, sql.CpCall):
        return isinstance(node.source, sql.MaskAggCall)
    if isinstance(node, sql.Arith):
        return _contains_agg(node.left) or _contains_agg(node.right)
    return False


def _const_value(node) -> float | None:
    if isinstance(node, sql.NumberLit):
        return node.value
    if isinstance(node, sql.Arith):
        left, right = _const_value(node.left), _const_value(node.right)
        if left is None or right is None:
            return None
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        return left / right
    return None


class _Planner:
    def __init__(self, ast: sql.QueryAst, store: MaskStore, roi_table):
        self.ast = ast
        self.store = store
        self.roi_table = roi_table
        self.warnings: list[str] = []
        self.verify_all = False

    # -- bindings ----------------------------------------------------------

    def roi_binding(self, spec: sql.RoiSpec) -> RoiBinding:
        if isinstance(spec, sql.RoiKeyword):
            if spec.kind == "full":
                return RoiBinding.full()
            if self.roi_table is None:
                raise MissingRoiTable(
                    "query uses 'object' rois but no roi table was supplied"
                )
            return RoiBinding.per_mask(self.roi_table)
        # Dialect corners are 1-based inclusive.
        if spec.x1 < 1 or spec.y1 < 1 or spec.x2 < spec.x1 or spec.y2 < spec.y1:
            raise PlanError(f"bad roi literal {spec}")
        return RoiBinding.constant(Roi(spec.x1 - 1, spec.y1 - 1, spec.x2, spec.y2))

    def value_range(self, lo: float, hi: float) -> ValueRange:
        try:
            return ValueRange(lo, hi)
        except ValueError as e:
            raise PlanError(str(e)) from e

    # -- expressions -------------------------------------------------------

    def to_expr(self, node: sql.AstExpr, *, mask_agg_sink: list | None = None) -> Expr:
        if isinstance(node, sql.NumberLit):
            return Const(node.value)
        if isinstance(node, sql.ColumnRef):
            raise UnknownColumn(
                f"column {node.name!r} cannot appear inside a count expression"
            )
        if isinstance(node, sql.AreaCall):
            return AreaTerm(self.roi_binding(node.roi))
        if isinstance(node, sql.CpCall):
            if isinstance(node.source, sql.MaskAggCall):
                if mask_agg_sink is None:
                    raise PlanError("mask aggregation requires GROUP BY")
                mask_agg_sink.append(node.source)
            return CpTerm(self.roi_binding(node.roi), self.value_range(node.lo, node.hi))
        if isinstance(node, sql.ScalarAggCall):
            raise PlanError("scalar aggregates cannot nest inside count expressions")
        if isinstance(node, sql.Arith):
            try:
                return BinOp(
                    node.op,
                    self.to_expr(node.left, mask_agg_sink=mask_agg_sink),
                    self.to_expr(node.right, mask_agg_sink=mask_agg_sink),
                )
            except NonMonotoneOperator as e:
                raise PlanError(str(e)) from e
        raise PlanError(f"cannot plan expression {node!r}")

    # -- WHERE -------------------------------------------------------------

    def split_where(self, cond) -> tuple[list, list]:
        """Top-level AND conjuncts -> (metadata-only, count-bearing)."""
        conjuncts = (
            list(cond.items) if isinstance(cond, sql.BoolExpr) and cond.op == "and" else [cond]
        )
        meta, cp = [], []
        for c in conjuncts:
            (cp if _contains_cp(c) else meta).append(c)
        return meta, cp

    def meta_filter_ids(self, meta_conds) -> list[int]:
        entries = list(self.store.entries())
        keep = []
        for e in entries:
            if all(self.eval_meta(c, e.meta) for c in meta_conds):
                keep.append(e.mask_id)
        return keep

    def eval_meta(self, cond, meta) -> bool:
        if isinstance(cond, sql.BoolExpr):
            results = (self.eval_meta(c, meta) for c in cond.items)
            return all(results) if cond.op == "and" else any(results)
        if isinstance(cond, sql.InList):
            self.check_column(cond.column)
            return getattr(meta, cond.column) in cond.values
        if isinstance(cond, sql.Compare):
            left = self.meta_operand(cond.left, meta)
            right = self.meta_operand(cond.right, meta)
            if cond.op == "=":
                return left == right
            return left > right if cond.op == ">" else left < right
        raise PlanError(f"cannot evaluate metadata condition {cond!r}")

    def meta_operand(self, node, meta):
        if isinstance(node, sql.ColumnRef):
            self.check_column(node.name)
            return getattr(meta, node.name)
        v = _const_value(node)
        if v is None:
            raise PlanError(f"unsupported metadata operand {node!r}")
        return v

    def check_column(self, name: str) -> None:
        if name not in META_COLUMNS:
            raise UnknownColumn(f"unknown column {name!r}")

    def to_pred_node(self, cond):
        if isinstance(cond, sql.BoolExpr):
            return BoolOp(cond.op, tuple(self.to_pred_node(c) for c in cond.items))
        if isinstance(cond, sql.InList):
            self.check_column(cond.column)
            return MetaComparison(cond.column, "in", cond.values)
        if isinstance(cond, sql.Compare):
            lcp, rcp = _contains_cp(cond.left), _contains_cp(cond.right)
            if not lcp and not rcp:
                # Pure metadata comparison nested under OR.
                if isinstance(cond.left, sql.ColumnRef) and cond.op == "=":
                    self.check_column(cond.left.name)
                    v = _const_value(cond.right)
                    if v is not None:
                        return MetaComparison(cond.left.name, "=", (v,))
                raise PlanError(f"cannot plan comparison {cond!r}")
            if cond.op == "=":
                raise PlanError("count comparisons support only > and <")
            if lcp and rcp:
                expr = BinOp("-", self.to_expr(cond.left), self.to_expr(cond.right))
                pred = Predicate(expr, cond.op, 0.0)
            elif lcp:
                t = _const_value(cond.right)
                if t is None:
                    raise PlanError("comparison threshold must be a constant")
                pred = Predicate(self.to_expr(cond.left), cond.op, t)
            else:
                t = _const_value(cond.left)
                if t is None:
                    raise PlanError("comparison threshold must be a constant")
                flipped = "<" if cond.op == ">" else ">"
                pred = Predicate(self.to_expr(cond.right), flipped, t)
            if not is_boundable(pred.expr):
                self.verify_all = True
                self.warnings.append(
                    "predicate is not monotone in its count terms; verifying all masks"
                )
            return CpComparison(pred)
        raise PlanError(f"cannot plan condition {cond!r}")

    # -- HAVING --------------------------------------------------------------

    def to_having(self, cond, agg_expr: sql.AstExpr, alias: str | None):
        if isinstance(cond, sql.BoolExpr):
            return HavingBool(
                cond.op, tuple(self.to_having(c, agg_expr, alias) for c in cond.items)
            )
        if isinstance(cond, sql.Compare):
            if cond.op == "=":
                raise PlanError("HAVING comparisons support only > and <")
            left_is_agg = self.refers_to_agg(cond.left, agg_expr, alias)
            right_is_agg = self.refers_to_agg(cond.right, agg_expr, alias)
            if left_is_agg and not right_is_agg:
                t = _const_value(cond.right)
                if t is None:
                    raise PlanError("HAVING threshold must be a constant")
                return HavingCmp(cond.op, t)
            if right_is_agg and not left_is_agg:
                t = _const_value(cond.left)
                if t is None:
                    raise PlanError("HAVING threshold must be a constant")
                return HavingCmp("<" if cond.op == ">" else ">", t)
        raise PlanError("HAVING must compare the aggregate against a constant")

    def refers_to_agg(self, node, agg_expr, alias) -> bool:
        if isinstance(node, sql.ColumnRef) and alias and node.name == alias:
            return True
        return node == agg_expr

    # -- the main entry ------------------------------------------------------

    def plan(self) -> QueryPlan:
        ast = self.ast
        if ast.from_name.lower() != VIEW_NAME:
            raise PlanError(f"unknown view {ast.from_name!r}")

        meta_conds, cp_conds = ([], [])
        if ast.where is not None:
            meta_conds, cp_conds = self.split_where(ast.where)
        target_ids = self.meta_filter_ids(meta_conds)

        pred_node = None
        if cp_conds:
            nodes = [self.to_pred_node(c) for c in cp_conds]
            pred_node = nodes[0] if len(nodes) == 1 else BoolOp("and", tuple(nodes))

        agg_items = [
            it
            for it in ast.select
            if isinstance(it, sql.SelectExpr) and _contains_agg(it.expr)
        ]
        if ast.group_by is not None or agg_items:
            plan = self.plan_aggregation(target_ids, pred_node, agg_items)
        elif ast.order is not None:
            plan = self.plan_topk(target_ids, pred_node)
        else:
            plan = QueryPlan(
                target_ids,
                FilterSpec(pred_node, ast.limit),
                select=self.select_items(allow_value_exprs=True),
                verify_all=self.verify_all,
            )
        if self.warnings:
            plan.label = ";".join(self.warnings)
        return plan

    def select_items(self, allow_value_exprs: bool):
        items: list = []
        for it in self.ast.select:
            if isinstance(it, sql.SelectStar):
                items.extend(Column(c) for c in META_COLUMNS)
            elif isinstance(it.expr, sql.ColumnRef):
                self.check_column(it.expr.name)
                items.append(Column(it.alias or it.expr.name))
                if it.alias and it.alias != it.expr.name:
                    raise PlanError("column aliases are not supported")
            else:
                if not allow_value_exprs:
                    raise PlanError("expression not allowed in this select list")
                name = it.alias or f"expr{len(items)}"
                items.append(ExprItem(name, self.to_expr(it.expr)))
        names = [i.name for i in items]
        if len(set(names)) != len(names):
            raise PlanError("duplicate select column names")
        return tuple(items)

    def order_expr(self) -> tuple[sql.AstExpr, str | None]:
        """Resolve ORDER BY to an AST expression plus the matching alias."""
        ref = self.ast.order.ref
        if isinstance(ref, str):
            for it in self.ast.select:
                if isinstance(it, sql.SelectExpr) and it.alias == ref:
                    return it.expr, ref
            raise UnknownColumn(f"ORDER BY references unknown alias {ref!r}")
        return ref, None

    def plan_topk(self, target_ids, pred_node) -> QueryPlan:
        ast = self.ast
        expr_ast, alias = self.order_expr()
        if not _contains_cp(expr_ast):
            raise PlanError("ORDER BY must rank by a count expression")
        expr = self.to_expr(expr_ast)
        if ast.limit is not None and ast.limit < 1:
            raise PlanError("LIMIT must be at least 1")
        k = ast.limit
        select: list = []
        for it in ast.select:
            if isinstance(it, sql.SelectStar):
                select.extend(Column(c) for c in META_COLUMNS)
            elif isinstance(it.expr, sql.ColumnRef):
                self.check_column(it.expr.name)
                select.append(Column(it.expr.name))
            elif it.expr == expr_ast:
                select.append(ExprItem(it.alias or "value", expr))
            else:
                raise PlanError("top-k select may list columns and the ranking expression")
        if not is_boundable(expr):
            self.verify_all = True
            self.warnings.append("ranking expression is not index-boundable")
        return QueryPlan(
            target_ids,
            TopKSpec(expr, k, ast.order.descending, pred_node),
            select=tuple(select),
            verify_all=self.verify_all,
        )

    def plan_aggregation(self, target_ids, pred_node, agg_items) -> QueryPlan:
        ast = self.ast
        if pred_node is not None:
            raise PlanError("WHERE count filters with GROUP BY are not supported")
        if ast.group_by is None:
            raise PlanError("aggregates require GROUP BY")
        if ast.group_by not in GROUP_KEYS:
            raise PlanError(f"GROUP BY must use one of {GROUP_KEYS}")
        if len(agg_items) != 1:
            raise PlanError("exactly one aggregate expression is required")
        agg_item = agg_items[0]

        mask_aggs: list[sql.MaskAggCall] = []
        node = agg_item.expr
        if isinstance(node, sql.ScalarAggCall):
            inner = self.to_expr(node.arg)
            value = ScalarAggSpec(node.fn, inner)
        else:
            expr = self.to_expr(node, mask_agg_sink=mask_aggs)
            if not mask_aggs:
                raise PlanError("grouped select must aggregate (SCALAR_AGG or MASK_AGG)")
            if len(set(mask_aggs)) != 1:
                raise PlanError("only one mask aggregate per query is supported")
            call = mask_aggs[0]
            factory = MASK_AGG_REGISTRY.get(call.name)
            if factory is None:
                raise PlanError(f"unknown mask aggregate {call.name!r}")
            args = () if call.threshold is None else (call.threshold,)
            value = MaskAggSpec(factory(*args), expr)

        having = None
        if ast.having is not None:
            having = self.to_having(ast.having, agg_item.expr, agg_item.alias)

        descending = None
        limit = ast.limit
        if ast.order is not None:
            expr_ast, _ = self.order_expr()
            if expr_ast != agg_item.expr:
                raise PlanError("grouped ORDER BY must rank by the aggregate")
            descending = ast.order.descending
        elif limit is not None:
            raise PlanError("LIMIT on grouped queries requires ORDER BY")
        if limit is not None and limit < 1:
            raise PlanError("LIMIT must be at least 1")

        select: list = []
        for it in ast.select:
            if isinstance(it, sql.SelectStar):
                raise PlanError("SELECT * is not valid with GROUP BY")
            if isinstance(it.expr, sql.ColumnRef):
                if it.expr.name != ast.group_by:
                    raise UnknownColumn(
                        f"grouped select may only list the group key, got {it.expr.name!r}"
                    )
                select.append(Column(it.expr.name))
            else:
                select.append(ExprItem(it.alias or "value", Const(0.0)))
        # The aggregate's ExprItem is a placeholder; the engine computes the
        # group value itself and only needs its output name.
        return QueryPlan(
            target_ids,
            AggSpec(ast.group_by, value, having, descending, limit),
            select=tuple(select),
            verify_all=self.verify_all,
        )


def plan(
    ast: sql.QueryAst,
    store: MaskStore,
    roi_table: Mapping[int, Roi] | None = None,
) -> QueryPlan:
    """Plan a parsed query against a store's manifest."""
    return _Planner(ast, store, roi_table).plan()
