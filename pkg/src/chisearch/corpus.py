"""Synthetic mask corpora for tests and benchmarks.

Three pixel distributions with deliberately different bound behavior:

* ``uniform``  -- i.i.d. noise; the worst case for pruning since every
  rectangle looks alike.
* ``blob``     -- a few smooth bumps with per-mask peak intensity drawn
  over a wide range, so counts spread out and bounds separate masks well.
* ``edge``     -- mass concentrated near the borders (the shape of a
  classic spurious-correlation artifact), low in the middle.

A corpus is a mask store plus a per-mask object-box table. Masks of the
same image share object boxes and blob geometry, so grouped queries see
coherent groups. Generation is deterministic from the seed: the same call
produces byte-identical stores.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .store import MAX_PIXEL, MaskMeta, MaskStore, Roi, read_f32_file, write_roi_table

DISTRIBUTIONS = ("uniform", "blob", "edge")


def _grids(width: int, height: int):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def _finish(field: np.ndarray) -> np.ndarray:
    return np.clip(field, 0.0, MAX_PIXEL).astype(np.float32)


def uniform_mask(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    return rng.random((height, width), dtype=np.float32)


def blob_mask(
    rng: np.random.Generator,
    width: int,
    height: int,
    centers=None,
    sigma: float | None = None,
) -> np.ndarray:
    xs, ys = _grids(width, height)
    if centers is None:
        centers = blob_geometry(rng, width, height)[0]
    if sigma is None:
        sigma = rng.uniform(min(width, height) / 10, min(width, height) / 4)
    field = np.zeros((height, width))
    for cx, cy in centers:
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    peak = rng.uniform(0.3, MAX_PIXEL)
    field *= peak / field.max()
    field += rng.uniform(0.0, 0.02, size=field.shape)
    return _finish(field)


def blob_geometry(rng: np.random.Generator, width: int, height: int):
    """Blob centers biased toward the middle, plus a matching object box."""
    n = int(rng.integers(1, 4))
    centers = []
    for _ in range(n):
        cx = float(np.clip(rng.normal(0.5, 0.15), 0.12, 0.88)) * width
        cy = float(np.clip(rng.normal(0.5, 0.15), 0.12, 0.88)) * height
        centers.append((cx, cy))
    sigma = rng.uniform(min(width, height) / 10, min(width, height) / 4)
    cx, cy = centers[0]
    half = 1.8 * sigma
    x1 = int(np.clip(cx - half, 0, width - 2))
    x2 = int(np.clip(cx + half, x1 + 2, width))
    y1 = int(np.clip(cy - half, 0, height - 2))
    y2 = int(np.clip(cy + half, y1 + 2, height))
    return centers, sigma, Roi(x1, y1, x2, y2)


def edge_mask(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    xs, ys = _grids(width, height)
    border = np.minimum(np.minimum(xs, width - 1 - xs), np.minimum(ys, height - 1 - ys))
    depth = border / (min(width, height) / 2)
    scale = rng.uniform(0.08, 0.25)
    peak = rng.uniform(0.3, MAX_PIXEL)
    field = peak * np.exp(-depth / scale)
    field += rng.uniform(0.0, 0.02, size=field.shape)
    return _finish(field)


def random_roi(rng: np.random.Generator, width: int, height: int, min_side: int = 4) -> Roi:
    min_side = min(min_side, width, height)
    x1 = int(rng.integers(0, width - min_side + 1))
    y1 = int(rng.integers(0, height - min_side + 1))
    x2 = int(rng.integers(x1 + min_side, width + 1))
    y2 = int(rng.integers(y1 + min_side, height + 1))
    return Roi(x1, y1, x2, y2)


def generate_corpus(
    out_dir: str | Path,
    count: int,
    width: int,
    height: int,
    distribution: str,
    seed: int,
    models: int = 2,
) -> Path:
    """Write ``count`` masks (``models`` per image) and their roi table."""
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    rois: dict[int, Roi] = {}
    with MaskStore.create(out_dir) as store:
        mask_id = 1
        image_id = 1
        while mask_id <= count:
            if distribution == "blob":
                centers, sigma, box = blob_geometry(rng, width, height)
            else:
                centers, sigma, box = None, None, random_roi(
                    rng, width, height, min_side=max(4, min(width, height) // 6)
                )
            for model in range(1, models + 1):
                if mask_id > count:
                    break
                if distribution == "uniform":
                    pixels = uniform_mask(rng, width, height)
                elif distribution == "blob":
                    pixels = blob_mask(rng, width, height, centers, sigma)
                else:
                    pixels = edge_mask(rng, width, height)
                store.ingest_mask(
                    MaskMeta(mask_id, image_id, model, 1), width, height, pixels
                )
                rois[mask_id] = box
                mask_id += 1
            image_id += 1
    write_roi_table(out_dir / "rois.tsv", rois)
    return out_dir


def ingest_f32_files(
    out_dir: str | Path,
    files: list[str | Path],
    width: int,
    height: int,
    models: int = 1,
    clamp: bool = False,
) -> Path:
    """Build a store from headerless .f32 rasters (the external ingestion path)."""
    out_dir = Path(out_dir)
    rois: dict[int, Roi] = {}
    with MaskStore.create(out_dir) as store:
        for i, path in enumerate(files):
            pixels = read_f32_file(path, width, height)
            mask_id = i + 1
            meta = MaskMeta(mask_id, 1 + i // models, 1 + i % models, 1)
            store.ingest_mask(meta, width, height, pixels, clamp=clamp)
            rois[mask_id] = Roi(0, 0, width, height)
    write_roi_table(out_dir / "rois.tsv", rois)
    return out_dir
