"""Pseudo-RGB rendering of the embedding grid and blob-line detection.

The 512-d cell vectors are projected onto their top three principal
components, rendered as a false-color image, and the dominant channel is
thresholded into binary blob lines at full page resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .doc_io import otsu_threshold

MIN_BLOB_CELLS = 4


@dataclass
class PCAProjection:
    mean: np.ndarray  # (512,)
    components: np.ndarray  # (3, 512), orthonormal, variance-ordered
    scores: np.ndarray  # (H, W, 3)
    eigenvalues: np.ndarray  # (3,)
    rank: int
    degenerate: bool


@dataclass
class PseudoRGBImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    page_id: str = ""
    degenerate_channels: tuple[int, ...] = ()


@dataclass
class BlobLineMap:
    mask: np.ndarray  # (h, w) bool
    labels: np.ndarray  # (h, w) int32, ids 1..count
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def pca_cells(cells: np.ndarray, n_components: int = 3) -> PCAProjection:
    """Exact PCA of (H, W, D) cell vectors via covariance eigendecomposition.

    Sign convention: each component's largest-magnitude coordinate is made
    positive. Components beyond the data rank are zero-filled and flagged.
    """
    cells = np.asarray(cells, dtype=np.float64)
    h, w, d = cells.shape
    n = h * w
    if n < n_components:
        raise ValueError(f"need at least {n_components} cells, got {n}")
    x = cells.reshape(n, d)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    vals = eigvals[order].copy()
    comps = eigvecs[:, order].T.copy()

    tol = max(float(eigvals.max()), 0.0) * 1e-10 + 1e-30
    rank = int((vals > tol).sum())
    for k in range(n_components):
        if k >= rank:
            comps[k] = 0.0
            vals[k] = 0.0
        else:
            i = int(np.argmax(np.abs(comps[k])))
            if comps[k, i] < 0:
                comps[k] = -comps[k]
    scores = (xc @ comps.T).reshape(h, w, n_components)
    return PCAProjection(mean, comps, scores, np.maximum(vals, 0.0), rank, rank < n_components)


def pca_project(grid) -> PCAProjection:
    """PCA of an EmbeddingGrid's cells (see pca_cells)."""
    return pca_cells(np.asarray(grid.cells))


def to_pseudo_rgb(proj: PCAProjection, page_id: str = "") -> PseudoRGBImage:
    """Min-max normalize each score channel to [0, 1]; flat channels map to 0.5."""
    scores = proj.scores
    out = np.empty_like(scores)
    degenerate = []
    for k in range(scores.shape[2]):
        ch = scores[:, :, k]
        lo, hi = float(ch.min()), float(ch.max())
        if hi - lo < 1e-12:
            out[:, :, k] = 0.5
            degenerate.append(k)
        else:
            out[:, :, k] = (ch - lo) / (hi - lo)
    return PseudoRGBImage(out, page_id=page_id, degenerate_channels=tuple(degenerate))


def _relabel_by_first_pixel(lab: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    if n == 0:
        return lab.astype(np.int32), 0
    flat = lab.ravel()
    raw, first = np.unique(flat, return_index=True)
    order = [int(i) for i in raw[np.argsort(first)] if i != 0]
    remap = np.zeros(n + 1, dtype=np.int32)
    for new_id, old in enumerate(order, start=1):
        remap[old] = new_id
    return remap[lab], len(order)


def threshold_blob_lines(
    prgb: PseudoRGBImage,
    ink,
    cfg,
    min_blob_cells: int = MIN_BLOB_CELLS,
) -> BlobLineMap:
    """Threshold the dominant pseudo-RGB channel into full-resolution blob lines.

    Steps: Otsu on channel 0, polarity chosen so the selected cells carry the
    higher mean ink fraction (blob lines strike through text), speckle
    components below `min_blob_cells` dropped, nearest-neighbour upscale by
    the central-window factor, crop to the page frame, 8-connected labeling.
    """
    ink_mask = np.asarray(getattr(ink, "mask", ink), dtype=bool)
    h, w = ink_mask.shape
    cell = cfg.window
    grid_h, grid_w = prgb.pixels.shape[:2]

    channel = prgb.pixels[:, :, 0]
    lo, hi = float(channel.min()), float(channel.max())
    if hi - lo < 1e-12:
        return BlobLineMap(
            np.zeros((h, w), dtype=bool), np.zeros((h, w), dtype=np.int32), 0
        )
    t = otsu_threshold(channel)
    low_side = channel < t

    padded_ink = np.zeros((grid_h * cell, grid_w * cell), dtype=bool)
    padded_ink[:h, :w] = ink_mask
    ink_frac = padded_ink.reshape(grid_h, cell, grid_w, cell).mean(axis=(1, 3))

    def ink_score(m):
        return float(ink_frac[m].mean()) if m.any() else 0.0

    selected = low_side if ink_score(low_side) > ink_score(~low_side) else ~low_side

    lab, n = ndimage.label(selected, structure=np.ones((3, 3), dtype=bool))
    if n:
        sizes = np.bincount(lab.ravel())
        drop = np.flatnonzero(sizes < min_blob_cells)
        selected[np.isin(lab, drop[drop > 0])] = False

    full = np.kron(selected, np.ones((cell, cell), dtype=bool))[:h, :w]
    lab_full, n_full = ndimage.label(full, structure=np.ones((3, 3), dtype=bool))
    labels, count = _relabel_by_first_pixel(lab_full, n_full)
    return BlobLineMap(full, labels, count)


def blob_line_pixels(blob_map: BlobLineMap, blob_id: int) -> np.ndarray:
    """(n, 2) row/col coordinates of one labeled blob line."""
    if not 1 <= blob_id <= blob_map.count:
        raise ValueError(f"blob id {blob_id} out of range 1..{blob_map.count}")
    return np.argwhere(blob_map.labels == blob_id)
