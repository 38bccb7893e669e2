import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lineweave import pair_gen
from lineweave.doc_io import BinaryImage, DocumentImage
from lineweave.pair_gen import (
    PairConfig,
    Patch,
    build_pair_dataset,
    count_pairs,
    eligible_directions,
    export_pairs,
    make_pair,
    sample_first_patch,
    sample_neighbor_patch,
)


def _page(h, w, value=0.0, pid="pg"):
    return DocumentImage(np.full((h, w), value, np.float32), id=pid)


def _ink(doc, on=True):
    return BinaryImage(np.full((doc.height, doc.width), on, bool))


# ------------------------------------------------------------- count_pairs


def test_count_pairs_baseline():
    assert count_pairs(1400, 1050, 350, 10) == 120


def test_count_pairs_identity():
    assert count_pairs(350, 350, 350, 1) == 1


def test_count_pairs_floor_before_multiply():
    assert count_pairs(700, 690, 350, 3) == 9


def test_count_pairs_patch_too_large():
    with pytest.raises(ValueError):
        count_pairs(300, 700, 350, 2)


@settings(max_examples=50, deadline=None)
@given(
    h=st.integers(100, 3000),
    w=st.integers(100, 3000),
    p=st.integers(10, 99),
    n=st.integers(1, 40),
)
def test_count_pairs_formula(h, w, p, n):
    assert count_pairs(h, w, p, n) == int((h * w) // (p * p)) * n


# ------------------------------------------------------------- sampling


def test_first_patch_all_ink_accepted():
    cfg = PairConfig(patch_size=32, gap=4, jitter_max=2)
    doc = _page(120, 120)
    rng = np.random.default_rng(0)
    patch = sample_first_patch(doc, _ink(doc), cfg, rng)
    assert patch.side == 32
    r, c = patch.origin
    assert 0 <= r <= 88 and 0 <= c <= 88


def test_first_patch_blank_page_too_sparse():
    cfg = PairConfig(patch_size=32, gap=4, jitter_max=2)
    doc = _page(120, 120, value=1.0)
    with pytest.raises(ValueError, match="too sparse"):
        sample_first_patch(doc, _ink(doc, on=False), cfg, np.random.default_rng(0))


def test_first_patch_ink_ratio_respected():
    cfg = PairConfig(patch_size=16, gap=2, jitter_max=1, min_ink_ratio=0.25)
    px = np.ones((80, 80), np.float32)
    px[:, :40] = 0.0  # left half ink
    doc = DocumentImage(px, id="half")
    ink = BinaryImage(px < 0.5)
    rng = np.random.default_rng(1)
    for _ in range(200):
        patch = sample_first_patch(doc, ink, cfg, rng)
        ratio = ink.mask[
            patch.origin[0] : patch.origin[0] + 16, patch.origin[1] : patch.origin[1] + 16
        ].mean()
        assert ratio >= 0.25


def test_neighbor_offset_interval_east():
    """Interval arithmetic from the sampling rule: for east neighbours the
    column offset lies in [p+gap, p+gap+jitter] and |row offset| <= jitter."""
    cfg = PairConfig(patch_size=350, gap=44, jitter_max=22)
    doc = _page(1200, 1200)
    first = Patch(doc.pixels[425:775, 22:372].copy(), (425, 22), "pg")
    rng = np.random.default_rng(2)
    east_seen = 0
    for _ in range(400):
        b = sample_neighbor_patch(doc, first, cfg, rng)
        dr = b.origin[0] - first.origin[0]
        dc = b.origin[1] - first.origin[1]
        if dc > 0 and abs(dr) <= 22:  # east draw
            east_seen += 1
            assert 394 <= dc <= 416
    assert east_seen > 0


def test_neighbor_degenerate_jitter_south():
    cfg = PairConfig(patch_size=40, gap=0, jitter_max=0)
    doc = _page(200, 200)
    first = Patch(doc.pixels[10:50, 80:120].copy(), (10, 80), "pg")
    rng = np.random.default_rng(3)
    for _ in range(50):
        b = sample_neighbor_patch(doc, first, cfg, rng)
        dr, dc = b.origin[0] - first.origin[0], b.origin[1] - first.origin[1]
        assert (abs(dr), abs(dc)) in {(40, 0), (0, 40), (40, 40)}
        if dr == 40 and dc == 0:
            return  # exact south offset (p, 0) observed
    pytest.fail("south direction never drawn")


def test_neighbor_all_directions_and_no_overlap():
    cfg = PairConfig(patch_size=24, gap=3, jitter_max=2)
    doc = _page(400, 400)
    rng = np.random.default_rng(4)
    ink = _ink(doc)
    seen = set()
    for _ in range(2000):
        a = sample_first_patch(doc, ink, cfg, rng)
        b = sample_neighbor_patch(doc, a, cfg, rng)
        dr = b.origin[0] - a.origin[0]
        dc = b.origin[1] - a.origin[1]
        # patches never overlap: separation >= p + gap on an active axis
        assert max(abs(dr), abs(dc)) >= 24 + 3
        seen.add((np.sign(dr), np.sign(dc)))
    assert len(seen) == 8


def test_no_direction_fits_errors():
    cfg = PairConfig(patch_size=100, gap=10, jitter_max=5)
    doc = _page(120, 120)
    first = Patch(doc.pixels[10:110, 10:110].copy(), (10, 10), "pg")
    with pytest.raises(ValueError, match="direction"):
        sample_neighbor_patch(doc, first, cfg, np.random.default_rng(0))


def test_eligible_directions_center_all_eight():
    dirs = eligible_directions((500, 500), (1400, 1400), 350, 44, 22)
    assert len(dirs) == 8


# ------------------------------------------------------------- make_pair


def _patch_from(arr, origin=(0, 0)):
    return Patch(np.asarray(arr, np.float32), origin, "pg")


def test_make_pair_similar_identity():
    rng = np.random.default_rng(6)
    a = _patch_from(np.arange(16).reshape(4, 4) / 16)
    b = _patch_from(np.arange(16)[::-1].reshape(4, 4) / 16)
    while True:
        pair = make_pair(a, b, want_similar=True, rng=rng)
        if pair.transform.augmentation == "identity":
            break
    assert pair.label == 1
    assert pair.transform.base_rotation == 0
    assert np.array_equal(pair.b.pixels, b.pixels)


def test_make_pair_different_rot90():
    rng = np.random.default_rng(7)
    a = _patch_from(np.zeros((4, 4)))
    b = _patch_from(np.arange(16).reshape(4, 4) / 16)
    while True:
        pair = make_pair(a, b, want_similar=False, rng=rng)
        if pair.transform.augmentation == "identity":
            break
    assert pair.label == 0
    assert pair.transform.base_rotation == 90
    assert np.array_equal(pair.b.pixels, np.rot90(b.pixels))


def test_make_pair_rot90_then_rot180_is_rot270():
    rng = np.random.default_rng(8)
    b = _patch_from(np.arange(16).reshape(4, 4) / 16)
    while True:
        pair = make_pair(_patch_from(np.zeros((4, 4))), b, want_similar=False, rng=rng)
        if pair.transform.augmentation == "rot180":
            break
    # pixel-level oracle: rot90 then rot180 equals rot270
    assert np.array_equal(pair.b.pixels, np.rot90(b.pixels, 3))


def test_make_pair_size_mismatch():
    with pytest.raises(ValueError):
        make_pair(
            _patch_from(np.zeros((4, 4))),
            _patch_from(np.zeros((5, 5))),
            True,
            np.random.default_rng(0),
        )


def test_augmentation_uniform_within_3_sigma():
    rng = np.random.default_rng(9)
    a = _patch_from(np.zeros((2, 2)))
    b = _patch_from(np.zeros((2, 2)))
    n = 10_000
    counts = {"identity": 0, "rot180": 0, "hflip": 0}
    for _ in range(n):
        counts[make_pair(a, b, True, rng).transform.augmentation] += 1
    sigma = (n * (1 / 3) * (2 / 3)) ** 0.5
    for name in counts:
        assert abs(counts[name] - n / 3) <= 3 * sigma


def test_label_zero_iff_rot90_in_record():
    rng = np.random.default_rng(10)
    a = _patch_from(np.zeros((3, 3)))
    for want in (True, False):
        pair = make_pair(a, a, want, rng)
        assert (pair.label == 0) == (pair.transform.base_rotation == 90)


# --------------------------------------------------------------- dataset


def _text_page(h, w, seed, pid):
    rng = np.random.default_rng(seed)
    px = np.ones((h, w), np.float32)
    for r0 in range(20, h - 40, 60):
        px[r0 : r0 + 30] = rng.uniform(0.0, 0.3, size=(30, w)).astype(np.float32)
    return DocumentImage(px, id=pid)


def test_budget_single_700_page():
    doc = _text_page(700, 700, 0, "solo")
    cfg = PairConfig(patch_size=350, gap=0, jitter_max=0, val_fraction=0.1)
    ds = build_pair_dataset([doc], cfg, seed=0)
    assert ds.budget.n_p == 4
    pairs = ds.train + ds.val
    assert len(pairs) == 4
    labels = sorted(p.label for p in pairs)
    assert labels == [0, 0, 1, 1]


def test_dataset_deterministic():
    docs = [_text_page(300, 300, i, f"p{i}") for i in range(4)]
    cfg = PairConfig(patch_size=100, gap=10, jitter_max=5)
    d1 = build_pair_dataset(docs, cfg, seed=3)
    d2 = build_pair_dataset(docs, cfg, seed=3)
    assert len(d1.train) == len(d2.train)
    for a, b in zip(d1.train + d1.val, d2.train + d2.val):
        assert np.array_equal(a.a.pixels, b.a.pixels)
        assert np.array_equal(a.b.pixels, b.b.pixels)
        assert a.label == b.label


def test_dataset_balance_and_same_page_pairs():
    docs = [_text_page(320, 280, i, f"p{i}") for i in range(12)]
    cfg = PairConfig(patch_size=90, gap=8, jitter_max=4)
    ds = build_pair_dataset(docs, cfg, seed=1)
    pairs = ds.train + ds.val
    assert len(pairs) == ds.budget.n_p
    n_similar = sum(p.label for p in pairs)
    assert abs(2 * n_similar - len(pairs)) <= 1
    for p in pairs:
        assert p.a.source_id == p.b.source_id


def test_page_level_split_disjoint():
    docs = [_text_page(320, 280, i, f"p{i}") for i in range(10)]
    cfg = PairConfig(patch_size=90, gap=8, jitter_max=4, val_fraction=0.2)
    ds = build_pair_dataset(docs, cfg, seed=2)
    train_pages = {p.a.source_id for p in ds.train}
    val_pages = {p.a.source_id for p in ds.val}
    assert train_pages.isdisjoint(val_pages)
    assert ds.val, "validation split should not be empty at 0.2 fraction"


def test_zero_usable_pages():
    docs = [_page(50, 50, 0.0, "tiny")]
    with pytest.raises(ValueError, match="usable"):
        build_pair_dataset(docs, PairConfig(patch_size=100), seed=0)


def test_export_manifest(tmp_path):
    docs = [_text_page(300, 300, i, f"p{i}") for i in range(2)]
    cfg = PairConfig(patch_size=100, gap=10, jitter_max=5)
    ds = build_pair_dataset(docs, cfg, seed=3)
    manifest = export_pairs(ds, tmp_path)
    rows = manifest.read_text().strip().splitlines()
    assert len(rows) == 1 + ds.budget.n_p
    tiles = list((tmp_path / "tiles").glob("*.png"))
    assert len(tiles) == 2 * ds.budget.n_p
