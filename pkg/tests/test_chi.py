import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chisearch.chi import (
    CHI_MAGIC,
    ChiConfig,
    ConfigMismatch,
    CorruptIndex,
    IndexStore,
    NotAvailableRegion,
    OverflowDetected,
    build_chi,
    grid_boundaries,
    is_available_region,
    load_index,
    merge_index,
    persist_index,
    region_histogram,
)
from chisearch.store import MaskMeta, MaskRecord, Roi, ValueRange, cp_exact

from conftest import count_pixels_loop, record


def test_grid_boundaries_include_ragged_edge():
    g = grid_boundaries(10, 7, ChiConfig(3, 3, 4))
    assert g.xs == (3, 6, 9, 10)
    assert g.ys == (3, 6, 7)
    g2 = grid_boundaries(8, 8, ChiConfig(2, 2, 2))
    assert g2.xs == (2, 4, 6, 8)


def test_worked_example_corner_counts(grid_example_index):
    # First cell corner: four pixels total, none at or above 0.5; the
    # fourth-cell corner covers sixteen pixels, three of them high.
    assert grid_example_index.counts[0, 0].tolist() == [4, 0]
    assert grid_example_index.counts[1, 1].tolist() == [16, 3]


def test_zero_mask_prefixes():
    rec = record(np.zeros((4, 4), dtype=np.float32))
    idx = build_chi(rec, ChiConfig(2, 2, 2))
    for i, x in enumerate((2, 4)):
        for j, y in enumerate((2, 4)):
            assert idx.counts[i, j, 0] == x * y
            assert idx.counts[i, j, 1] == 0


def test_counts_match_brute_force_on_ragged_grid():
    rng = np.random.default_rng(9)
    rec = record(rng.random((7, 10), dtype=np.float32))
    cfg = ChiConfig(3, 3, 4)
    idx = build_chi(rec, cfg)
    g = grid_boundaries(10, 7, cfg)
    for i, x in enumerate(g.xs):
        for j, y in enumerate(g.ys):
            for b in range(cfg.bins):
                want = count_pixels_loop(
                    rec.pixels, Roi(0, 0, x, y), float(cfg.bin_edges[b]), float("inf")
                )
                assert idx.counts[i, j, b] == want


@given(
    seed=st.integers(0, 10_000),
    width=st.integers(1, 16),
    height=st.integers(1, 16),
    cw=st.integers(1, 6),
    ch=st.integers(1, 6),
    bins=st.integers(1, 6),
)
def test_defining_invariant_property(seed, width, height, cw, ch, bins):
    rng = np.random.default_rng(seed)
    rec = record(rng.random((height, width), dtype=np.float32))
    cfg = ChiConfig(cw, ch, bins)
    idx = build_chi(rec, cfg)
    g = grid_boundaries(width, height, cfg)
    for i, x in enumerate(g.xs):
        for j, y in enumerate(g.ys):
            prefix = Roi(0, 0, x, y)
            assert idx.counts[i, j, 0] == x * y
            for b in range(bins):
                lo = float(cfg.bin_edges[b])
                assert idx.counts[i, j, b] == cp_exact(rec, prefix, ValueRange(lo, 1.0))


def test_counts_monotone_in_all_axes():
    rng = np.random.default_rng(11)
    idx = build_chi(record(rng.random((20, 20), dtype=np.float32)), ChiConfig(4, 4, 5))
    c = idx.counts.astype(np.int64)
    assert (np.diff(c, axis=2) <= 0).all()
    assert (np.diff(c, axis=0) >= 0).all()
    assert (np.diff(c, axis=1) >= 0).all()


def test_in_memory_count_size_matches_formula():
    rng = np.random.default_rng(0)
    idx = build_chi(record(rng.random((224, 224), dtype=np.float32)), ChiConfig(28, 28, 16))
    assert idx.counts.nbytes == 4 * 16 * 8 * 8 == 4096
    big = build_chi(record(rng.random((448, 448), dtype=np.float32)), ChiConfig(64, 64, 16))
    assert big.counts.nbytes == 7 * 7 * 16 * 4 == 3136


def test_overflow_guard():
    fake = MaskRecord(MaskMeta(1, 1, 1, 1), 1 << 16, 1 << 16, np.zeros((1, 1), np.float32))
    with pytest.raises(OverflowDetected):
        build_chi(fake, ChiConfig(2, 2, 2))


# -- available regions ---------------------------------------------------------


def test_available_region_examples(grid_example):
    g = grid_boundaries(8, 8, ChiConfig(2, 2, 2))
    # The worked example's regions, converted to 0-based half-open form.
    assert is_available_region(Roi(2, 2, 4, 6), g)
    assert not is_available_region(Roi(3, 3, 5, 5), g)


def test_full_mask_always_available():
    for w, h, cw, ch in ((8, 8, 2, 2), (10, 7, 3, 3), (5, 9, 4, 2)):
        g = grid_boundaries(w, h, ChiConfig(cw, ch, 2))
        assert is_available_region(Roi(0, 0, w, h), g)


# -- region histograms ----------------------------------------------------------


def test_worked_example_region_histograms(grid_example_index):
    # Inner rectangle count 2, enclosing rectangle count 8 (bin index 1).
    assert region_histogram(grid_example_index, Roi(2, 2, 4, 4)).tolist() == [4, 2, 0]
    assert region_histogram(grid_example_index, Roi(2, 2, 6, 6)).tolist() == [16, 8, 0]


def test_prefix_region_equals_corner_row(grid_example_index):
    hist = region_histogram(grid_example_index, Roi(0, 0, 4, 4))
    assert hist[:-1].tolist() == grid_example_index.counts[1, 1].tolist()
    assert hist[-1] == 0


def test_region_histogram_not_available_raises(grid_example_index):
    with pytest.raises(NotAvailableRegion):
        region_histogram(grid_example_index, Roi(3, 3, 5, 5))


def test_region_histogram_matches_brute_force_everywhere():
    rng = np.random.default_rng(23)
    rec = record(rng.random((11, 13), dtype=np.float32))
    cfg = ChiConfig(4, 3, 5)
    idx = build_chi(rec, cfg)
    g = grid_boundaries(13, 11, cfg)
    xs, ys = (0,) + g.xs, (0,) + g.ys
    for ix1, x1 in enumerate(xs):
        for x2 in xs[ix1 + 1 :]:
            for iy1, y1 in enumerate(ys):
                for y2 in ys[iy1 + 1 :]:
                    roi = Roi(x1, y1, x2, y2)
                    got = region_histogram(idx, roi).tolist()
                    want = [
                        count_pixels_loop(rec.pixels, roi, float(e), float("inf"))
                        for e in cfg.bin_edges[:-1]
                    ] + [0]
                    assert got == want
                    assert got[0] == roi.area


# -- persistence ---------------------------------------------------------------


def _store_with_masks(seed=3, n=4, w=17, h=9, cfg=ChiConfig(4, 4, 3)):
    rng = np.random.default_rng(seed)
    store = IndexStore(cfg)
    for i in range(n):
        store.insert(build_chi(record(rng.random((h, w), dtype=np.float32), mask_id=i + 1), cfg))
    return store


def test_persist_load_roundtrip_bit_exact(tmp_path):
    store = _store_with_masks()
    path = tmp_path / "idx.chi"
    persist_index(store, path)
    loaded = load_index(path)
    assert loaded.config == store.config
    assert loaded.mask_ids() == store.mask_ids()
    for mid in store.mask_ids():
        assert np.array_equal(loaded.get_or_absent(mid).counts, store.get_or_absent(mid).counts)
    # Writing the loaded store again reproduces the same bytes.
    path2 = tmp_path / "idx2.chi"
    persist_index(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_persisted_payload_size_formula(tmp_path):
    rng = np.random.default_rng(1)
    cfg = ChiConfig(28, 28, 16)
    store = IndexStore(cfg)
    store.insert(build_chi(record(rng.random((224, 224), dtype=np.float32)), cfg))
    path = tmp_path / "one.chi"
    persist_index(store, path)
    header = len(CHI_MAGIC) + 32  # version, bins, cell dims, domain, count
    per_record = 24  # id + dims + grid shape
    assert path.stat().st_size == header + per_record + 4096


def test_load_rejects_corruption(tmp_path):
    store = _store_with_masks()
    path = tmp_path / "idx.chi"
    persist_index(store, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "bad_magic.chi"
    bad_magic.write_bytes(b"NOPE!\n" + bytes(raw[6:]))
    with pytest.raises(CorruptIndex):
        load_index(bad_magic)

    truncated = tmp_path / "trunc.chi"
    truncated.write_bytes(bytes(raw[:-10]))
    with pytest.raises(CorruptIndex):
        load_index(truncated)

    trailing = tmp_path / "trail.chi"
    trailing.write_bytes(bytes(raw) + b"\x00\x00")
    with pytest.raises(CorruptIndex):
        load_index(trailing)


def test_merge_refuses_config_mismatch():
    a = _store_with_masks(cfg=ChiConfig(4, 4, 3))
    b = _store_with_masks(cfg=ChiConfig(2, 2, 3))
    with pytest.raises(ConfigMismatch):
        merge_index(a, b)
    c = _store_with_masks(seed=99, cfg=ChiConfig(4, 4, 3))
    merged = merge_index(a, c)
    assert len(merged) == len(a)


def test_insert_refuses_config_mismatch():
    store = IndexStore(ChiConfig(4, 4, 3))
    rng = np.random.default_rng(0)
    idx = build_chi(record(rng.random((8, 8), dtype=np.float32)), ChiConfig(2, 2, 3))
    with pytest.raises(ConfigMismatch):
        store.insert(idx)


def test_get_or_absent():
    cfg = ChiConfig(4, 4, 3)
    store = IndexStore(cfg)
    assert store.get_or_absent(1) is None
    rng = np.random.default_rng(0)
    idx = build_chi(record(rng.random((8, 8), dtype=np.float32), mask_id=1), cfg)
    store.insert(idx)
    assert store.get_or_absent(1) is idx
    assert 1 in store and 2 not in store
