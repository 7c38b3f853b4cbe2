"""Mask storage: ingestion, retrieval, and exact pixel counting.

A mask store is a directory holding two files:

* ``manifest.tsv`` -- one record per line: mask_id, image_id, model_id,
  mask_type, width, height, byte_offset (tab-separated decimal).
* ``masks.bin`` -- magic bytes ``MSDB1\\n`` followed by the pixel payloads
  of all masks, concatenated in manifest order. Each payload is the mask's
  pixels as little-endian 32-bit IEEE-754 floats, row-major.

Pixel values live in the half-open domain [0, 1). Every count the rest of
the engine computes is ultimately defined against :func:`cp_exact` here.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

PIXEL_MIN = 0.0
PIXEL_MAX = 1.0
STORE_MAGIC = b"MSDB1\n"
MANIFEST_NAME = "manifest.tsv"
DATA_NAME = "masks.bin"

# Largest float32 strictly below 1.0; the top of the representable domain.
MAX_PIXEL = float(np.nextafter(np.float32(1.0), np.float32(0.0)))

PIXEL_DTYPE = np.dtype("<f4")


class StoreError(Exception):
    """Base class for mask-store failures."""


class DimensionMismatch(StoreError):
    pass


class ValueOutOfRange(StoreError):
    def __init__(self, index: int, value: float):
        super().__init__(f"pixel {index} has value {value!r}, outside [0, 1)")
        self.index = index
        self.value = value


class DuplicateMaskId(StoreError):
    pass


class NotFound(StoreError):
    pass


class RoiOutOfBounds(StoreError):
    pass


class MissingRoiBinding(StoreError):
    pass


@dataclass(frozen=True)
class Roi:
    """Axis-aligned rectangle [x1, x2) x [y1, y2), 0-based, half-open."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValueError(f"degenerate roi {self!r}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def check_within(self, width: int, height: int) -> None:
        if self.x2 > width or self.y2 > height:
            raise RoiOutOfBounds(f"{self!r} exceeds mask {width}x{height}")

    def contains(self, other: "Roi") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )


@dataclass(frozen=True)
class ValueRange:
    """Half-open pixel value interval [lo, hi)."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (PIXEL_MIN <= self.lo < self.hi <= PIXEL_MAX):
            raise ValueError(f"invalid value range [{self.lo}, {self.hi})")


FULL_RANGE = ValueRange(PIXEL_MIN, PIXEL_MAX)


class RoiBinding:
    """How a query's region argument resolves to a concrete Roi per mask.

    Three kinds: a constant rectangle shared by all masks, a per-mask table
    (the ``object`` form, supplied externally), or the whole mask (``full``).
    """

    _CONSTANT = "constant"
    _PER_MASK = "per_mask"
    _FULL = "full"

    def __init__(self, kind: str, roi: Roi | None = None, table: Mapping[int, Roi] | None = None):
        self.kind = kind
        self._roi = roi
        self._table = table

    @classmethod
    def constant(cls, roi: Roi) -> "RoiBinding":
        return cls(cls._CONSTANT, roi=roi)

    @classmethod
    def per_mask(cls, table: Mapping[int, Roi]) -> "RoiBinding":
        return cls(cls._PER_MASK, table=dict(table))

    @classmethod
    def full(cls) -> "RoiBinding":
        return cls(cls._FULL)

    def resolve(self, mask_id: int, width: int, height: int) -> Roi:
        if self.kind == self._CONSTANT:
            return self._roi
        if self.kind == self._FULL:
            return Roi(0, 0, width, height)
        roi = self._table.get(mask_id)
        if roi is None:
            raise MissingRoiBinding(f"no roi bound for mask {mask_id}")
        return roi

    def __eq__(self, other):
        return (
            isinstance(other, RoiBinding)
            and self.kind == other.kind
            and self._roi == other._roi
            and self._table == other._table
        )

    def __hash__(self):
        table = None if self._table is None else tuple(sorted(self._table.items()))
        return hash((self.kind, self._roi, table))

    def __repr__(self):
        if self.kind == self._CONSTANT:
            return f"RoiBinding.constant({self._roi})"
        if self.kind == self._FULL:
            return "RoiBinding.full()"
        return f"RoiBinding.per_mask(<{len(self._table)} rois>)"


@dataclass(frozen=True)
class MaskMeta:
    mask_id: int
    image_id: int
    model_id: int
    mask_type: int


@dataclass(frozen=True)
class ManifestEntry:
    meta: MaskMeta
    width: int
    height: int
    byte_offset: int

    @property
    def mask_id(self) -> int:
        return self.meta.mask_id

    @property
    def nbytes(self) -> int:
        return self.width * self.height * 4


@dataclass
class MaskRecord:
    meta: MaskMeta
    width: int
    height: int
    pixels: np.ndarray  # float32, shape (height, width); pixel (x, y) = pixels[y, x]

    @property
    def mask_id(self) -> int:
        return self.meta.mask_id


def cp_exact(mask: MaskRecord, roi: Roi, rng: ValueRange) -> int:
    """Count pixels of ``mask`` inside ``roi`` with values in [rng.lo, rng.hi).

    This is the ground truth the index only ever brackets.
    """
    roi.check_within(mask.width, mask.height)
    window = mask.pixels[roi.y1 : roi.y2, roi.x1 : roi.x2]
    return int(np.count_nonzero((window >= rng.lo) & (window < rng.hi)))


def validate_pixels(pixels: np.ndarray, *, clamp: bool = False) -> np.ndarray:
    """Return a float32 copy of ``pixels``, enforcing the [0, 1) domain.

    With ``clamp`` set, finite values >= 1.0 are lowered to the largest
    float32 below 1.0 (for lossy upstream sources); everything else out of
    domain is still rejected.
    """
    arr = np.asarray(pixels, dtype=PIXEL_DTYPE)
    flat = arr.ravel()
    bad = ~np.isfinite(flat)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueOutOfRange(i, float(flat[i]))
    if clamp:
        arr = np.minimum(arr, np.float32(MAX_PIXEL))
        flat = arr.ravel()
    out = (flat < PIXEL_MIN) | (flat >= PIXEL_MAX)
    if out.any():
        i = int(np.argmax(out))
        raise ValueOutOfRange(i, float(flat[i]))
    return arr


class MaskStore:
    """Directory-backed mask database.

    Single writer during ingestion; safe for concurrent readers afterwards.
    Reads use ``os.pread`` so worker threads never share seek state. Every
    ``get_mask`` call bumps an atomic load counter: that counter is the raw
    material for the fraction-of-masks-loaded statistic.
    """

    def __init__(self, directory: Path, *, writable: bool):
        self.directory = Path(directory)
        self._writable = writable
        self._entries: dict[int, ManifestEntry] = {}
        self._order: list[int] = []
        self._load_calls = 0
        self._counter_lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._manifest_fh = None
        self._data_fh = None
        self._data_fd = None

    # -- lifecycle -----------------------------------------------------

    @classmethod
    def create(cls, directory: str | Path) -> "MaskStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        store = cls(directory, writable=True)
        store._manifest_fh = open(directory / MANIFEST_NAME, "w", encoding="ascii")
        store._data_fh = open(directory / DATA_NAME, "wb")
        store._data_fh.write(STORE_MAGIC)
        return store

    @classmethod
    def open(cls, directory: str | Path) -> "MaskStore":
        directory = Path(directory)
        store = cls(directory, writable=False)
        data_path = directory / DATA_NAME
        store._data_fd = os.open(data_path, os.O_RDONLY)
        if os.pread(store._data_fd, len(STORE_MAGIC), 0) != STORE_MAGIC:
            os.close(store._data_fd)
            raise StoreError(f"{data_path} does not start with {STORE_MAGIC!r}")
        size = data_path.stat().st_size
        with open(directory / MANIFEST_NAME, encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 7:
                    raise StoreError(f"manifest line {lineno}: expected 7 fields")
                mid, img, mdl, mtype, w, h, off = (int(p) for p in parts)
                if mid in store._entries:
                    raise StoreError(f"manifest line {lineno}: duplicate mask_id {mid}")
                entry = ManifestEntry(MaskMeta(mid, img, mdl, mtype), w, h, off)
                if off < len(STORE_MAGIC) or off + entry.nbytes > size:
                    raise StoreError(f"manifest line {lineno}: offset outside data file")
                store._entries[mid] = entry
                store._order.append(mid)
        spans = sorted((e.byte_offset, e.byte_offset + e.nbytes) for e in store._entries.values())
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if a1 > b0:
                raise StoreError("manifest offsets overlap")
        return store

    def close(self) -> None:
        if self._manifest_fh is not None:
            self._manifest_fh.close()
            self._manifest_fh = None
        if self._data_fh is not None:
            self._data_fh.close()
            self._data_fh = None
        if self._data_fd is not None:
            os.close(self._data_fd)
            self._data_fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- ingestion -----------------------------------------------------

    def ingest_mask(
        self,
        meta: MaskMeta,
        width: int,
        height: int,
        pixels,
        *,
        clamp: bool = False,
    ) -> int:
        if not self._writable:
            raise StoreError("store is open read-only")
        if width < 1 or height < 1:
            raise DimensionMismatch(f"bad dimensions {width}x{height}")
        arr = np.asarray(pixels)
        if arr.size != width * height:
            raise DimensionMismatch(
                f"got {arr.size} pixels for a {width}x{height} mask"
            )
        arr = validate_pixels(arr.reshape(height, width), clamp=clamp)
        with self._write_lock:
            if meta.mask_id in self._entries:
                raise DuplicateMaskId(f"mask_id {meta.mask_id} already ingested")
            offset = self._data_fh.tell()
            self._data_fh.write(np.ascontiguousarray(arr, dtype=PIXEL_DTYPE).tobytes())
            entry = ManifestEntry(meta, width, height, offset)
            self._entries[meta.mask_id] = entry
            self._order.append(meta.mask_id)
            self._manifest_fh.write(
                f"{meta.mask_id}\t{meta.image_id}\t{meta.model_id}\t{meta.mask_type}"
                f"\t{width}\t{height}\t{offset}\n"
            )
        return meta.mask_id

    # -- retrieval -----------------------------------------------------

    def get_meta(self, mask_id: int) -> ManifestEntry:
        entry = self._entries.get(mask_id)
        if entry is None:
            raise NotFound(f"mask_id {mask_id} not in manifest")
        return entry

    def get_mask(self, mask_id: int) -> MaskRecord:
        """Load one mask's pixels from disk. Counted: this call defines FML."""
        entry = self.get_meta(mask_id)
        if self._data_fd is None:
            raise StoreError("store not open for reading (create() stores must be reopened)")
        with self._counter_lock:
            self._load_calls += 1
        raw = os.pread(self._data_fd, entry.nbytes, entry.byte_offset)
        if len(raw) != entry.nbytes:
            raise StoreError(f"short read for mask {mask_id}")
        pixels = np.frombuffer(raw, dtype=PIXEL_DTYPE).reshape(entry.height, entry.width)
        return MaskRecord(entry.meta, entry.width, entry.height, pixels)

    @property
    def load_calls(self) -> int:
        with self._counter_lock:
            return self._load_calls

    def mask_ids(self) -> list[int]:
        return list(self._order)

    def entries(self) -> Iterable[ManifestEntry]:
        return (self._entries[i] for i in self._order)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, mask_id: int) -> bool:
        return mask_id in self._entries


def read_f32_file(path: str | Path, width: int, height: int) -> np.ndarray:
    """Read a headerless little-endian float32 raster of the given shape."""
    raw = Path(path).read_bytes()
    expected = width * height * 4
    if len(raw) != expected:
        raise DimensionMismatch(
            f"{path}: {len(raw)} bytes, expected {expected} for {width}x{height}"
        )
    return np.frombuffer(raw, dtype=PIXEL_DTYPE).reshape(height, width)


def load_roi_table(path: str | Path) -> dict[int, Roi]:
    """Parse a per-mask roi table: mask_id, x1, y1, x2, y2 (0-based half-open)."""
    table: dict[int, Roi] = {}
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise StoreError(f"{path} line {lineno}: expected 5 fields")
            mid, x1, y1, x2, y2 = (int(p) for p in parts)
            table[mid] = Roi(x1, y1, x2, y2)
    return table


def write_roi_table(path: str | Path, table: Mapping[int, Roi]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for mid in sorted(table):
            r = table[mid]
            fh.write(f"{mid}\t{r.x1}\t{r.y1}\t{r.x2}\t{r.y2}\n")
