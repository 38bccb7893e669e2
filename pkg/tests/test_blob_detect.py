import numpy as np
import pytest

from lineweave.blob_detect import (
    BlobLineMap,
    PseudoRGBImage,
    blob_line_pixels,
    pca_cells,
    pca_project,
    threshold_blob_lines,
    to_pseudo_rgb,
)
from lineweave.feature_grid import EmbeddingGrid, GridConfig, PadOffsets


def _grid(cells):
    cells = np.asarray(cells, np.float32)
    cfg = GridConfig(patch_size=96, window=16)
    h, w = cells.shape[0] * 16, cells.shape[1] * 16
    return EmbeddingGrid(cells, "t", cfg, PadOffsets((h, w), (h, w), 40))


# -------------------------------------------------------------------- PCA


def test_pca_identical_cells_degenerate():
    cells = np.tile(np.linspace(0, 1, 512, dtype=np.float32), (4, 5, 1))
    proj = pca_project(_grid(cells))
    assert proj.degenerate
    assert proj.rank == 0
    assert np.allclose(proj.scores, 0.0)
    assert np.allclose(proj.components, 0.0)


def test_pca_rank_one_line():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=512)
    direction /= np.linalg.norm(direction)
    t = rng.normal(size=(6, 6, 1))
    cells = (t * direction).astype(np.float32)
    proj = pca_project(_grid(cells))
    assert proj.rank == 1
    total = proj.eigenvalues.sum()
    assert proj.eigenvalues[0] == pytest.approx(total, rel=1e-9)
    assert np.allclose(proj.scores[:, :, 1:], 0.0, atol=1e-8)


def test_pca_reconstruction_error_equals_dropped_eigenvalues():
    rng = np.random.default_rng(1)
    cells = rng.normal(size=(6, 6, 512)).astype(np.float64)
    proj = pca_cells(cells)
    x = cells.reshape(-1, 512)
    xc = x - x.mean(axis=0)
    # full eigendecomposition oracle
    cov = xc.T @ xc / len(xc)
    eigvals = np.linalg.eigvalsh(cov)[::-1]
    recon = proj.scores.reshape(-1, 3) @ proj.components
    residual = ((xc - recon) ** 2).sum() / len(xc)
    assert residual == pytest.approx(eigvals[3:].sum(), rel=1e-8)


def test_pca_orthonormal_and_ordered():
    rng = np.random.default_rng(2)
    cells = rng.normal(size=(5, 7, 512)).astype(np.float32)
    proj = pca_project(_grid(cells))
    gram = proj.components @ proj.components.T
    assert np.allclose(gram, np.eye(3), atol=1e-6)
    variances = proj.scores.reshape(-1, 3).var(axis=0)
    assert variances[0] >= variances[1] >= variances[2]
    # projecting the mean gives zero scores
    centered = proj.mean - proj.mean
    assert np.allclose(centered @ proj.components.T, 0.0)


def test_pca_sign_convention():
    rng = np.random.default_rng(3)
    cells = rng.normal(size=(4, 4, 512)).astype(np.float32)
    proj = pca_project(_grid(cells))
    for k in range(proj.rank):
        comp = proj.components[k]
        assert comp[np.argmax(np.abs(comp))] > 0


def test_pca_needs_three_cells():
    with pytest.raises(ValueError):
        pca_cells(np.zeros((1, 2, 512)))


# -------------------------------------------------------------- pseudo RGB


def test_pseudo_rgb_degenerate_uniform_gray():
    cells = np.ones((4, 4, 512), np.float32)
    prgb = to_pseudo_rgb(pca_project(_grid(cells)))
    assert np.allclose(prgb.pixels, 0.5)
    assert prgb.degenerate_channels == (0, 1, 2)


def test_pseudo_rgb_normalization_bounds():
    rng = np.random.default_rng(4)
    cells = rng.normal(size=(5, 5, 512)).astype(np.float32)
    prgb = to_pseudo_rgb(pca_project(_grid(cells)))
    for k in range(3):
        assert float(prgb.pixels[:, :, k].min()) == pytest.approx(0.0, abs=1e-12)
        assert float(prgb.pixels[:, :, k].max()) == pytest.approx(1.0, abs=1e-12)


def test_pseudo_rgb_equal_vectors_equal_colors():
    rng = np.random.default_rng(5)
    cells = rng.normal(size=(4, 5, 512)).astype(np.float32)
    cells[0, 0] = cells[3, 4]
    prgb = to_pseudo_rgb(pca_project(_grid(cells)))
    assert np.allclose(prgb.pixels[0, 0], prgb.pixels[3, 4], atol=1e-6)


# ------------------------------------------------------------ thresholding


def _banded_prgb_and_ink(n_bands=3, rows_per=2, gap_rows=2, cols=12, cell=16):
    """Alternating dark/light row bands plus ink aligned with the dark bands."""
    grid_h = n_bands * (rows_per + gap_rows)
    ch = np.zeros((grid_h, cols), np.float64)
    ink_rows = []
    r = 0
    for _ in range(n_bands):
        ch[r : r + rows_per] = 1.0
        ink_rows.append((r, r + rows_per))
        r += rows_per + gap_rows
    pixels = np.stack([ch, ch, ch], axis=2)
    prgb = PseudoRGBImage(pixels, "bands")
    ink = np.zeros((grid_h * cell, cols * cell), bool)
    for r0, r1 in ink_rows:
        ink[r0 * cell : r1 * cell] = True
    return prgb, ink


def test_threshold_band_count():
    prgb, ink = _banded_prgb_and_ink(n_bands=3)
    cfg = GridConfig(patch_size=96, window=16)
    bmap = threshold_blob_lines(prgb, ink, cfg)
    assert bmap.count == 3
    # polarity: blobs sit on the ink bands
    assert (bmap.mask & ink).sum() == bmap.mask.sum()


def test_threshold_uniform_prgb_empty():
    pixels = np.full((6, 6, 3), 0.5)
    prgb = PseudoRGBImage(pixels, "flat")
    ink = np.zeros((96, 96), bool)
    cfg = GridConfig(patch_size=96, window=16)
    bmap = threshold_blob_lines(prgb, ink, cfg)
    assert bmap.empty and bmap.count == 0


def test_threshold_upscaled_dims_match_page():
    prgb, ink = _banded_prgb_and_ink()
    ink = ink[:-5, :-7]  # page not a multiple of the window
    cfg = GridConfig(patch_size=96, window=16)
    bmap = threshold_blob_lines(prgb, ink, cfg)
    assert bmap.mask.shape == ink.shape
    assert bmap.labels.shape == ink.shape


def test_threshold_idempotent_on_own_output():
    prgb, ink = _banded_prgb_and_ink(n_bands=2)
    cfg = GridConfig(patch_size=96, window=16)
    bmap = threshold_blob_lines(prgb, ink, cfg)
    cell = cfg.window
    grid_mask = bmap.mask[::cell, ::cell].astype(np.float64)
    rerun = threshold_blob_lines(
        PseudoRGBImage(np.stack([grid_mask] * 3, axis=2), "again"), ink, cfg
    )
    assert np.array_equal(rerun.mask, bmap.mask)


def test_threshold_speckle_removed():
    prgb, ink = _banded_prgb_and_ink(n_bands=2)
    px = prgb.pixels.copy()
    px[-1, -1, 0] = 1.0  # single-cell speckle far from the bands
    bmap = threshold_blob_lines(
        PseudoRGBImage(px, "speck"), ink, GridConfig(patch_size=96, window=16)
    )
    assert bmap.count == 2


def test_blob_line_pixels_roundtrip():
    prgb, ink = _banded_prgb_and_ink(n_bands=2)
    cfg = GridConfig(patch_size=96, window=16)
    bmap = threshold_blob_lines(prgb, ink, cfg)
    sizes = [len(blob_line_pixels(bmap, i)) for i in range(1, bmap.count + 1)]
    assert sum(sizes) == int(bmap.mask.sum())
    with pytest.raises(ValueError):
        blob_line_pixels(bmap, bmap.count + 1)
