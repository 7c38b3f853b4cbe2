"""Sound lower/upper bounds on pixel counts, from the index alone.

For an arbitrary query rectangle and value range the index cannot answer
exactly, but it can bracket the answer. Spatially, the query rectangle is
snapped outward and inward to the nearest grid-aligned rectangles; along the
value axis, the range is widened and narrowed to the nearest bin edges.
Combining an enclosing region with a widened range can only overcount;
combining an enclosed region with a narrowed range can only undercount.
The slack of the other region is charged at one pixel per cell of area,
which yields a second bound of each kind; we always take the better one.

All functions here are pure over immutable inputs.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .chi import ChiIndex, GridBoundaries, region_histogram
from .store import Roi, RoiBinding, RoiOutOfBounds, ValueRange


class NonMonotoneOperator(ValueError):
    """Raised when an expression uses an operator bounds cannot pass through."""


class EmptyGroup(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    """Closed interval [lower, upper] guaranteed to contain the exact value."""

    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"inverted bounds {self!r}")

    @property
    def exact(self) -> bool:
        return self.lower == self.upper


@dataclass(frozen=True)
class SnappedRegions:
    """Grid-aligned rectangles bracketing a query rectangle.

    ``outer`` is the smallest aligned rectangle covering it; ``inner`` is the
    largest aligned rectangle it covers, or None when none exists.
    """

    outer: Roi
    inner: Roi | None


def snap_regions(roi: Roi, grid: GridBoundaries) -> SnappedRegions:
    if roi.x2 > grid.width or roi.y2 > grid.height:
        raise RoiOutOfBounds(f"{roi!r} exceeds grid {grid.width}x{grid.height}")
    xs, ys = grid.xs, grid.ys

    def down(v: int, bs: Sequence[int]) -> int:
        i = bisect_right(bs, v) - 1
        return bs[i] if i >= 0 else 0

    def up(v: int, bs: Sequence[int]) -> int:
        return bs[bisect_left(bs, v)]

    outer = Roi(down(roi.x1, xs), down(roi.y1, ys), up(roi.x2, xs), up(roi.y2, ys))

    ix1 = roi.x1 if roi.x1 == 0 else up(roi.x1, xs)
    iy1 = roi.y1 if roi.y1 == 0 else up(roi.y1, ys)
    # The inner right/bottom edge must land on a real boundary, never zero.
    jx = bisect_right(xs, roi.x2) - 1
    jy = bisect_right(ys, roi.y2) - 1
    inner = None
    if jx >= 0 and jy >= 0 and ix1 < xs[jx] and iy1 < ys[jy]:
        inner = Roi(ix1, iy1, xs[jx], ys[jy])
    return SnappedRegions(outer, inner)


def upper_bound(index: ChiIndex, roi: Roi, rng: ValueRange) -> int:
    return cp_bounds(index, roi, rng).upper


def lower_bound(index: ChiIndex, roi: Roi, rng: ValueRange) -> int:
    return cp_bounds(index, roi, rng).lower


def cp_bounds(index: ChiIndex, roi: Roi, rng: ValueRange) -> Bounds:
    """Bracket the count of roi pixels with values in [rng.lo, rng.hi)."""
    snapped = snap_regions(roi, index.grid)
    c_outer = region_histogram(index, snapped.outer)
    c_inner = region_histogram(index, snapped.inner) if snapped.inner else None
    inner_area = snapped.inner.area if snapped.inner else 0

    lo, hi = index.config.outer_bin_span(rng)
    ub1 = int(c_outer[lo] - c_outer[hi])
    if c_inner is None:
        ub2 = roi.area
    else:
        ub2 = int(c_inner[lo] - c_inner[hi]) + roi.area - inner_area
    upper = min(ub1, ub2, roi.area)

    a, z = index.config.inner_bin_span(rng)
    if a >= z:
        lower = 0
    else:
        lb1 = int(c_inner[a] - c_inner[z]) if c_inner is not None else 0
        lb2 = int(c_outer[a] - c_outer[z]) - (snapped.outer.area - roi.area)
        lower = max(lb1, lb2, 0)
    return Bounds(lower, upper)


# -- expressions over counts ------------------------------------------------
#
# Filter predicates and rankings are arithmetic over count terms for one
# mask, e.g. cp(...) - cp(...) or cp(...) / area(...). Bounds propagate
# through them by interval arithmetic, which is sound for +, -, * and
# division by a nonzero constant regardless of operand signs.


@dataclass(frozen=True)
class CpTerm:
    roi: RoiBinding
    rng: ValueRange


@dataclass(frozen=True)
class AreaTerm:
    """Area of the bound region; a per-mask constant known without loading."""

    roi: RoiBinding


@dataclass(frozen=True)
class Const:
    value: float


_ALLOWED_OPS = ("+", "-", "*", "/")


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in _ALLOWED_OPS:
            raise NonMonotoneOperator(f"operator {self.op!r} not supported")
        if self.op == "/" and isinstance(self.right, Const) and self.right.value == 0:
            raise NonMonotoneOperator("division by zero")


Expr = Union[CpTerm, AreaTerm, Const, BinOp]

Interval = tuple  # (lo, hi) of floats or aligned ndarrays


def interval_add(x: Interval, y: Interval) -> Interval:
    return (x[0] + y[0], x[1] + y[1])


def interval_sub(x: Interval, y: Interval) -> Interval:
    return (x[0] - y[1], x[1] - y[0])


def interval_mul(x: Interval, y: Interval) -> Interval:
    p1, p2, p3, p4 = x[0] * y[0], x[0] * y[1], x[1] * y[0], x[1] * y[1]
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return (lo, hi)


def interval_div(x: Interval, c) -> Interval:
    lo, hi = x[0] / c, x[1] / c
    return (np.minimum(lo, hi), np.maximum(lo, hi))


def is_boundable(expr: Expr) -> bool:
    """Whether interval propagation applies: division is only invertible by
    per-mask constants, so any other denominator forces exact evaluation."""
    if isinstance(expr, (CpTerm, AreaTerm, Const)):
        return True
    if expr.op == "/" and not isinstance(expr.right, (Const, AreaTerm)):
        return False
    return is_boundable(expr.left) and is_boundable(expr.right)


def expr_bounds(
    expr: Expr,
    cp_term_bounds: Callable[[CpTerm], Interval],
    area_value: Callable[[RoiBinding], float],
) -> Interval:
    """Interval for ``expr``; works elementwise when the callbacks vectorize."""
    if isinstance(expr, CpTerm):
        return cp_term_bounds(expr)
    if isinstance(expr, AreaTerm):
        v = area_value(expr.roi)
        return (v, v)
    if isinstance(expr, Const):
        return (expr.value, expr.value)
    left = expr_bounds(expr.left, cp_term_bounds, area_value)
    if expr.op == "/":
        if isinstance(expr.right, Const):
            return interval_div(left, expr.right.value)
        if isinstance(expr.right, AreaTerm):
            return interval_div(left, area_value(expr.right.roi))
        raise NonMonotoneOperator("division only by constants or areas")
    right = expr_bounds(expr.right, cp_term_bounds, area_value)
    if expr.op == "+":
        return interval_add(left, right)
    if expr.op == "-":
        return interval_sub(left, right)
    return interval_mul(left, right)


def expr_exact(
    expr: Expr,
    cp_term_exact: Callable[[CpTerm], float],
    area_value: Callable[[RoiBinding], float],
):
    """Exact value of ``expr``; the oracle path, loading whatever it needs."""
    if isinstance(expr, CpTerm):
        return cp_term_exact(expr)
    if isinstance(expr, AreaTerm):
        return area_value(expr.roi)
    if isinstance(expr, Const):
        return expr.value
    left = expr_exact(expr.left, cp_term_exact, area_value)
    if expr.op == "/":
        return left / expr_exact(expr.right, cp_term_exact, area_value)
    right = expr_exact(expr.right, cp_term_exact, area_value)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    return left * right


def cp_terms(expr: Expr) -> list[CpTerm]:
    """All count leaves of an expression, in evaluation order."""
    if isinstance(expr, CpTerm):
        return [expr]
    if isinstance(expr, BinOp):
        return cp_terms(expr.left) + cp_terms(expr.right)
    return []


_SCALAR_AGGS = ("SUM", "AVG", "MIN", "MAX")


def bound_scalar_agg(agg: str, items: Sequence[Bounds]) -> Bounds:
    """Bracket a scalar aggregate of exact values given per-item brackets."""
    if not items:
        raise EmptyGroup(f"{agg} over an empty group")
    agg = agg.upper()
    lowers = [b.lower for b in items]
    uppers = [b.upper for b in items]
    if agg == "SUM":
        return Bounds(sum(lowers), sum(uppers))
    if agg == "AVG":
        return Bounds(sum(lowers) / len(items), sum(uppers) / len(items))
    if agg == "MIN":
        return Bounds(min(lowers), min(uppers))
    if agg == "MAX":
        return Bounds(max(lowers), max(uppers))
    raise NonMonotoneOperator(f"unknown scalar aggregate {agg!r}")


def exact_scalar_agg(agg: str, values: Sequence[float]) -> float:
    if not values:
        raise EmptyGroup(f"{agg} over an empty group")
    agg = agg.upper()
    if agg == "SUM":
        return sum(values)
    if agg == "AVG":
        return sum(values) / len(values)
    if agg == "MIN":
        return min(values)
    if agg == "MAX":
        return max(values)
    raise NonMonotoneOperator(f"unknown scalar aggregate {agg!r}")
