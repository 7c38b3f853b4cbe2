"""Cumulative histogram index over mask grids.

Each mask gets a dense array ``counts[cx, cy, bin]`` holding, for every
grid-cell corner and value-bin threshold, the number of pixels in the
prefix rectangle from the origin to that corner whose value is at or above
the bin's lower edge. Counts are cumulative along both spatial axes and
reverse-cumulative along the bin axis, so the histogram of any rectangle
whose corners sit on grid boundaries falls out of four lookups.

Grid boundaries always include the mask's right/bottom edge, so masks whose
dimensions are not multiples of the cell size simply get narrower edge
cells; every formula below holds unchanged on the extended boundary set.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

from .store import MaskRecord, Roi, ValueRange

CHI_MAGIC = b"MCHI1\n"
CHI_VERSION = 1

_HEADER = struct.Struct("<IIIIffQ")  # version, bins, cell_w, cell_h, p_min, p_max, count
_RECORD = struct.Struct("<QIIII")  # mask_id, width, height, n_cx, n_cy


class ChiError(Exception):
    pass


class CorruptIndex(ChiError):
    pass


class ConfigMismatch(ChiError):
    pass


class OverflowDetected(ChiError):
    pass


class NotAvailableRegion(ChiError):
    pass


@dataclass(frozen=True)
class ChiConfig:
    """Index granularity: spatial cell size and number of equi-width value bins."""

    cell_width: int
    cell_height: int
    bins: int
    p_min: float = 0.0
    p_max: float = 1.0

    def __post_init__(self):
        if self.cell_width < 1 or self.cell_height < 1 or self.bins < 1:
            raise ValueError(f"invalid index config {self!r}")
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be below p_max")

    @property
    def bin_width(self) -> float:
        return (self.p_max - self.p_min) / self.bins

    @cached_property
    def bin_edges(self) -> np.ndarray:
        """The bins+1 value thresholds; binning and bound lookups must share these."""
        edges = self.p_min + self.bin_width * np.arange(self.bins + 1, dtype=np.float64)
        edges[-1] = self.p_max
        if not np.all(np.diff(edges) > 0):
            raise ValueError(f"bin edges collapse for {self!r}")
        return edges

    def outer_bin_span(self, rng: ValueRange) -> tuple[int, int]:
        """Bin indices (lo, hi) whose edges bracket [rng.lo, rng.hi) from outside."""
        edges = self.bin_edges
        lo = int(np.searchsorted(edges, rng.lo, side="right")) - 1
        hi = int(np.searchsorted(edges, rng.hi, side="left"))
        return lo, hi

    def inner_bin_span(self, rng: ValueRange) -> tuple[int, int]:
        """Bin indices (a, z) whose edges are bracketed by [rng.lo, rng.hi)."""
        edges = self.bin_edges
        a = int(np.searchsorted(edges, rng.lo, side="left"))
        z = int(np.searchsorted(edges, rng.hi, side="right")) - 1
        return a, z


def _boundaries(extent: int, cell: int) -> tuple[int, ...]:
    xs = list(range(cell, extent + 1, cell))
    if not xs or xs[-1] != extent:
        xs.append(extent)
    return tuple(xs)


@dataclass(frozen=True)
class GridBoundaries:
    """Sorted cell-corner coordinates along each axis, ending at the mask edge."""

    xs: tuple[int, ...]
    ys: tuple[int, ...]

    @property
    def width(self) -> int:
        return self.xs[-1]

    @property
    def height(self) -> int:
        return self.ys[-1]

    @cached_property
    def _x_rank(self) -> dict[int, int]:
        rank = {x: i + 1 for i, x in enumerate(self.xs)}
        rank[0] = 0
        return rank

    @cached_property
    def _y_rank(self) -> dict[int, int]:
        rank = {y: i + 1 for i, y in enumerate(self.ys)}
        rank[0] = 0
        return rank

    def x_rank(self, x: int) -> int:
        return self._x_rank[x]

    def y_rank(self, y: int) -> int:
        return self._y_rank[y]


@lru_cache(maxsize=4096)
def grid_boundaries(width: int, height: int, config: ChiConfig) -> GridBoundaries:
    return GridBoundaries(
        _boundaries(width, config.cell_width), _boundaries(height, config.cell_height)
    )


@dataclass
class ChiIndex:
    """One mask's corner-count array plus the grid it was built on."""

    mask_id: int
    width: int
    height: int
    config: ChiConfig
    counts: np.ndarray  # uint32, shape (n_cx, n_cy, bins), bin innermost

    @property
    def grid(self) -> GridBoundaries:
        return grid_boundaries(self.width, self.height, self.config)

    @property
    def n_cx(self) -> int:
        return self.counts.shape[0]

    @property
    def n_cy(self) -> int:
        return self.counts.shape[1]

    @property
    def payload_bytes(self) -> int:
        return self.counts.nbytes


def build_chi(mask: MaskRecord, config: ChiConfig) -> ChiIndex:
    """Build the corner-count array for one mask. Runs in O(width * height)."""
    if mask.width * mask.height >= 2**32:
        raise OverflowDetected("mask pixel count exceeds 32-bit counters")
    grid = grid_boundaries(mask.width, mask.height, config)
    n_cx, n_cy, b = len(grid.xs), len(grid.ys), config.bins

    # Bin of each pixel: the largest edge at or below its value. Using the
    # shared edges array keeps binning and bound lookups exactly consistent.
    bins = np.searchsorted(config.bin_edges, mask.pixels.ravel(), side="right") - 1

    ys, xs = np.divmod(np.arange(mask.width * mask.height), mask.width)
    cx = np.minimum(xs // config.cell_width, n_cx - 1)
    cy = np.minimum(ys // config.cell_height, n_cy - 1)
    flat = (cx * n_cy + cy) * b + bins
    per_cell = np.bincount(flat, minlength=n_cx * n_cy * b).reshape(n_cx, n_cy, b)

    rev = np.cumsum(per_cell[:, :, ::-1], axis=2)[:, :, ::-1]
    prefix = np.cumsum(np.cumsum(rev, axis=0), axis=1)
    return ChiIndex(mask.mask_id, mask.width, mask.height, config, prefix.astype(np.uint32))


def is_available_region(roi: Roi, grid: GridBoundaries) -> bool:
    """True when all four corners of ``roi`` sit on grid boundaries (or zero)."""
    return (
        roi.x2 in grid._x_rank
        and roi.y2 in grid._y_rank
        and roi.x2 != 0
        and roi.y2 != 0
        and roi.x1 in grid._x_rank
        and roi.y1 in grid._y_rank
    )


def _corner(index: ChiIndex, bx: int, by: int) -> np.ndarray:
    # Boundary rank 0 (the mask origin) contributes the all-zero histogram.
    if bx == 0 or by == 0:
        return np.zeros(index.config.bins, dtype=np.int64)
    return index.counts[bx - 1, by - 1].astype(np.int64)


def region_histogram(index: ChiIndex, roi: Roi) -> np.ndarray:
    """Reverse-cumulative counts of ``roi`` per bin threshold, length bins+1.

    Entry ``i`` counts pixels in the region with value at or above edge ``i``;
    the final entry is always zero. Exactly four corner lookups.
    """
    grid = index.grid
    if not is_available_region(roi, grid):
        raise NotAvailableRegion(f"{roi!r} is not on the index grid")
    bx1, bx2 = grid.x_rank(roi.x1), grid.x_rank(roi.x2)
    by1, by2 = grid.y_rank(roi.y1), grid.y_rank(roi.y2)
    hist = (
        _corner(index, bx2, by2)
        - _corner(index, bx1, by2)
        - _corner(index, bx2, by1)
        + _corner(index, bx1, by1)
    )
    return np.concatenate([hist, [0]])


class IndexStore:
    """In-memory collection of per-mask indexes sharing one config.

    Reads are lock-free; insertion takes a lock so parallel workers indexing
    distinct masks stay linearizable. Re-inserting the same mask id is
    harmless (both builds are identical), last write wins.
    """

    def __init__(self, config: ChiConfig):
        self.config = config
        self._entries: dict[int, ChiIndex] = {}
        self._lock = threading.Lock()
        self.generation = 0

    def get_or_absent(self, mask_id: int) -> ChiIndex | None:
        """The mask's index, or None when it has not been built yet."""
        return self._entries.get(mask_id)

    def insert(self, index: ChiIndex) -> None:
        if index.config != self.config:
            raise ConfigMismatch("index built with a different config")
        with self._lock:
            self._entries[index.mask_id] = index
            self.generation += 1

    def mask_ids(self) -> list[int]:
        return sorted(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, mask_id: int) -> bool:
        return mask_id in self._entries

    def payload_bytes(self) -> int:
        return sum(e.payload_bytes for e in self._entries.values())


def persist_index(store: IndexStore, path: str | Path) -> None:
    """Write the store to one file; see load_index for the inverse."""
    cfg = store.config
    with open(path, "wb") as fh:
        fh.write(CHI_MAGIC)
        fh.write(
            _HEADER.pack(
                CHI_VERSION,
                cfg.bins,
                cfg.cell_width,
                cfg.cell_height,
                cfg.p_min,
                cfg.p_max,
                len(store),
            )
        )
        for mask_id in store.mask_ids():
            idx = store.get_or_absent(mask_id)
            fh.write(_RECORD.pack(mask_id, idx.width, idx.height, idx.n_cx, idx.n_cy))
            fh.write(np.ascontiguousarray(idx.counts, dtype="<u4").tobytes())


def load_index(path: str | Path) -> IndexStore:
    raw = Path(path).read_bytes()
    if raw[: len(CHI_MAGIC)] != CHI_MAGIC:
        raise CorruptIndex(f"{path}: bad magic")
    off = len(CHI_MAGIC)
    try:
        version, bins, cw, ch, p_min, p_max, count = _HEADER.unpack_from(raw, off)
    except struct.error as e:
        raise CorruptIndex(f"{path}: truncated header") from e
    if version != CHI_VERSION:
        raise CorruptIndex(f"{path}: unsupported version {version}")
    off += _HEADER.size
    config = ChiConfig(cw, ch, bins, float(p_min), float(p_max))
    store = IndexStore(config)
    for _ in range(count):
        try:
            mask_id, width, height, n_cx, n_cy = _RECORD.unpack_from(raw, off)
        except struct.error as e:
            raise CorruptIndex(f"{path}: truncated record table") from e
        off += _RECORD.size
        nbytes = n_cx * n_cy * bins * 4
        if off + nbytes > len(raw):
            raise CorruptIndex(f"{path}: truncated counts for mask {mask_id}")
        grid = grid_boundaries(width, height, config)
        if (len(grid.xs), len(grid.ys)) != (n_cx, n_cy):
            raise CorruptIndex(f"{path}: grid shape mismatch for mask {mask_id}")
        counts = (
            np.frombuffer(raw, dtype="<u4", count=n_cx * n_cy * bins, offset=off)
            .reshape(n_cx, n_cy, bins)
            .copy()
        )
        off += nbytes
        store.insert(ChiIndex(mask_id, width, height, config, counts))
    if off != len(raw):
        raise CorruptIndex(f"{path}: {len(raw) - off} trailing bytes")
    return store


def merge_index(dst: IndexStore, src: IndexStore) -> IndexStore:
    """Fold ``src`` into ``dst``; refuses stores built with different configs."""
    if dst.config != src.config:
        raise ConfigMismatch(
            f"cannot merge {src.config} into store with {dst.config}"
        )
    for mask_id in src.mask_ids():
        dst.insert(src.get_or_absent(mask_id))
    return dst
