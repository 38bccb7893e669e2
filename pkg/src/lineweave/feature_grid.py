"""Sliding-window page embedding into a per-cell feature grid.

A p x p window slides over the padded page with stride w; each window is
embedded by one network branch, and the vector is attributed to the w x w
cell at the window's center. A page of h_d x w_d becomes an
(h_d/w) x (w_d/w) x 512 grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blob_detect import pca_cells
from .doc_io import DocumentImage
from .siamese_net import EMBED_DIM, ModelState, branch_forward, embed_batch

BACKGROUND_INTENSITY = 1.0
DEFAULT_WINDOW_BATCH = 64


@dataclass(frozen=True)
class GridConfig:
    patch_size: int = 350
    window: int = 20

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.patch_size <= self.window:
            raise ValueError("patch_size must exceed window")
        if (self.patch_size - self.window) % 2 != 0:
            raise ValueError("patch_size - window must be even for symmetric padding")

    @property
    def border(self) -> int:
        return (self.patch_size - self.window) // 2


@dataclass(frozen=True)
class PadOffsets:
    """Maps between original page coordinates and the padded frame."""

    orig: tuple[int, int]
    step1: tuple[int, int]  # right/bottom padded to window multiples
    border: int

    def to_padded(self, row: int, col: int) -> tuple[int, int]:
        return row + self.border, col + self.border

    def to_original(self, row: int, col: int) -> tuple[int, int] | None:
        r, c = row - self.border, col - self.border
        if 0 <= r < self.orig[0] and 0 <= c < self.orig[1]:
            return r, c
        return None


@dataclass
class EmbeddingGrid:
    cells: np.ndarray  # (H, W, 512) float32
    page_id: str
    config: GridConfig
    offsets: PadOffsets


def pad_document(doc: DocumentImage, cfg: GridConfig) -> tuple[np.ndarray, PadOffsets]:
    """Two-step padding with background intensity.

    Step 1 pads right/bottom to the next window multiple; step 2 adds
    (p - w) / 2 on all four sides so each window centers on its cell.
    """
    cfg.validate()
    h, w = doc.height, doc.width
    step1_h = -(-h // cfg.window) * cfg.window
    step1_w = -(-w // cfg.window) * cfg.window
    border = cfg.border
    padded = np.full(
        (step1_h + 2 * border, step1_w + 2 * border), BACKGROUND_INTENSITY, dtype=np.float32
    )
    padded[border : border + h, border : border + w] = doc.pixels
    return padded, PadOffsets((h, w), (step1_h, step1_w), border)


def grid_shape(doc: DocumentImage, cfg: GridConfig) -> tuple[int, int]:
    return -(-doc.height // cfg.window), -(-doc.width // cfg.window)


def _window_batches(padded: np.ndarray, cfg: GridConfig, grid_h: int, grid_w: int, batch: int):
    """Yield (index list, window stack) lazily; peak extra memory is one batch."""
    p, w = cfg.patch_size, cfg.window
    idxs: list[tuple[int, int]] = []
    wins: list[np.ndarray] = []
    for i in range(grid_h):
        for j in range(grid_w):
            wins.append(padded[i * w : i * w + p, j * w : j * w + p])
            idxs.append((i, j))
            if len(wins) == batch:
                yield idxs, np.stack(wins)
                idxs, wins = [], []
    if wins:
        yield idxs, np.stack(wins)


def extract_grid(
    model: ModelState,
    doc: DocumentImage,
    cfg: GridConfig,
    batch: int = DEFAULT_WINDOW_BATCH,
) -> EmbeddingGrid:
    """Embed every sliding window and assemble the page's feature grid."""
    cfg.validate()
    if model.arch.input_side != cfg.patch_size:
        raise ValueError(
            f"model input side {model.arch.input_side} != grid patch size {cfg.patch_size}"
        )
    padded, offsets = pad_document(doc, cfg)
    grid_h, grid_w = offsets.step1[0] // cfg.window, offsets.step1[1] // cfg.window
    cells = np.empty((grid_h, grid_w, EMBED_DIM), dtype=np.float32)
    for idxs, wins in _window_batches(padded, cfg, grid_h, grid_w, batch):
        emb = embed_batch(model, wins)
        for (i, j), v in zip(idxs, emb):
            cells[i, j] = v
    return EmbeddingGrid(cells, doc.id, cfg, offsets)


def save_grid(grid: EmbeddingGrid, path) -> None:
    np.save(path, grid.cells)


def load_grid(path, page_id: str, cfg: GridConfig, offsets: PadOffsets) -> EmbeddingGrid:
    cells = np.load(path)
    return EmbeddingGrid(cells.astype(np.float32), page_id, cfg, offsets)


def saliency_map(model: ModelState, patch) -> tuple[np.ndarray, bool]:
    """False-color view of one patch's last-conv activations.

    The m x m x 512 activation is treated as m^2 vectors, projected onto
    its own top three principal components, and each channel is min-max
    normalized. Returns (m x m x 3 image, degenerate flag); flat channels
    render as 0.5.
    """
    _, conv_map = branch_forward(model, patch)
    proj = pca_cells(conv_map)
    out = np.empty_like(proj.scores)
    for k in range(3):
        ch = proj.scores[:, :, k]
        lo, hi = float(ch.min()), float(ch.max())
        if hi - lo < 1e-12:
            out[:, :, k] = 0.5
        else:
            out[:, :, k] = (ch - lo) / (hi - lo)
    return out, proj.degenerate
