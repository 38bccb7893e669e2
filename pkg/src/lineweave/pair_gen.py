"""Self-supervised patch-pair generation from unlabeled pages.

Similar pairs are neighbouring patches (same coarse line trend); different
pairs rotate the second patch 90 degrees. A gap and jitter between the
patches prevent boundary-continuity cues, and every second patch gets one
augmentation from {identity, rotate 180, horizontal flip}.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .doc_io import BinaryImage, DocumentImage, binarize, save_image

MAX_REJECTIONS = 1000

# Compass order fixes the direction-index mapping for deterministic draws.
DIRECTIONS = (
    ("N", (-1, 0)),
    ("NE", (-1, 1)),
    ("E", (0, 1)),
    ("SE", (1, 1)),
    ("S", (1, 0)),
    ("SW", (1, -1)),
    ("W", (0, -1)),
    ("NW", (-1, -1)),
)


@dataclass
class Patch:
    pixels: np.ndarray  # (p, p) float32 in [0, 1]
    origin: tuple[int, int]  # top-left (row, col) in the source page
    source_id: str = ""

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


@dataclass
class TransformRecord:
    base_rotation: int  # 0 for similar, 90 for different
    augmentation: str  # identity | rot180 | hflip


@dataclass
class PatchPair:
    a: Patch
    b: Patch
    label: int  # similar=1, different=0
    transform: TransformRecord


@dataclass(frozen=True)
class PairBudget:
    h_a: float
    w_a: float
    p: int
    n_d: int
    n_p: int


@dataclass(frozen=True)
class PairConfig:
    """Sampling knobs; gap and jitter default to round(p/8) and round(p/16)
    so patch-size sweeps keep their proportions."""

    patch_size: int = 350
    gap: int | None = None
    jitter_max: int | None = None
    min_ink_ratio: float = 0.01
    val_fraction: float = 0.1

    @property
    def gap_px(self) -> int:
        return round(self.patch_size / 8) if self.gap is None else self.gap

    @property
    def jitter_px(self) -> int:
        return round(self.patch_size / 16) if self.jitter_max is None else self.jitter_max


@dataclass
class PairDataset:
    train: list[PatchPair]
    val: list[PatchPair]
    budget: PairBudget
    train_pages: list[str] = field(default_factory=list)
    val_pages: list[str] = field(default_factory=list)


def count_pairs(h_a: float, w_a: float, p: int, n_d: int) -> int:
    """Training-pair budget: floor((h_a * w_a) / p^2) * n_d."""
    if h_a <= 0 or w_a <= 0 or p <= 0 or n_d <= 0:
        raise ValueError("all budget inputs must be positive")
    if p > min(h_a, w_a):
        raise ValueError(f"patch size {p} exceeds average page side {min(h_a, w_a)}")
    return int(math.floor((h_a * w_a) / (p * p))) * n_d


def eligible_directions(
    origin: tuple[int, int], dims: tuple[int, int], p: int, gap: int, jitter_max: int
) -> list[str]:
    """Neighbour directions that fit for every possible jitter draw.

    Active axes need room for the worst-case offset p + gap + jitter_max;
    an inactive axis must host the full [-jitter_max, +jitter_max] range.
    """
    r, c = origin
    h, w = dims
    reach = p + gap + jitter_max
    out = []
    for name, (sr, sc) in DIRECTIONS:
        ok = True
        if sr > 0:
            ok &= r + reach + p <= h
        elif sr < 0:
            ok &= r - reach >= 0
        else:
            ok &= r - jitter_max >= 0 and r + jitter_max + p <= h
        if sc > 0:
            ok &= c + reach + p <= w
        elif sc < 0:
            ok &= c - reach >= 0
        else:
            ok &= c - jitter_max >= 0 and c + jitter_max + p <= w
        if ok:
            out.append(name)
    return out


def page_is_usable(dims: tuple[int, int], cfg: PairConfig) -> bool:
    """True when some origin admits at least one neighbour direction."""
    h, w = dims
    p, g, j = cfg.patch_size, cfg.gap_px, cfg.jitter_px
    vertical = h >= 2 * p + g + j and w >= p + 2 * j
    horizontal = w >= 2 * p + g + j and h >= p + 2 * j
    diagonal = h >= 2 * p + g + j and w >= 2 * p + g + j
    return vertical or horizontal or diagonal


def _crop(doc: DocumentImage, r: int, c: int, p: int) -> Patch:
    return Patch(doc.pixels[r : r + p, c : c + p].copy(), (r, c), doc.id)


def sample_first_patch(
    doc: DocumentImage, ink: BinaryImage, cfg: PairConfig, rng: np.random.Generator
) -> Patch:
    """Rejection-sample a patch over ink with room for at least one neighbour."""
    p = cfg.patch_size
    h, w = doc.height, doc.width
    if h < p or w < p:
        raise ValueError(f"page '{doc.id}' ({h}x{w}) cannot host a {p}x{p} patch")
    for _ in range(MAX_REJECTIONS):
        r = int(rng.integers(0, h - p + 1))
        c = int(rng.integers(0, w - p + 1))
        if float(ink.mask[r : r + p, c : c + p].mean()) < cfg.min_ink_ratio:
            continue
        if not eligible_directions((r, c), (h, w), p, cfg.gap_px, cfg.jitter_px):
            continue
        return _crop(doc, r, c, p)
    raise ValueError(f"page '{doc.id}' too sparse: {MAX_REJECTIONS} rejected samples")


def sample_neighbor_patch(
    doc: DocumentImage, first: Patch, cfg: PairConfig, rng: np.random.Generator
) -> Patch:
    """Sample the second patch from the eight neighbouring locations.

    The offset along each active axis is p + gap + u with u uniform in
    [0, jitter_max]; the inactive axis jitters uniformly in +-jitter_max.
    """
    p, g, j = cfg.patch_size, cfg.gap_px, cfg.jitter_px
    dims = (doc.height, doc.width)
    dirs = eligible_directions(first.origin, dims, p, g, j)
    if not dirs:
        raise ValueError(f"no neighbour direction fits at origin {first.origin}")
    name = dirs[int(rng.integers(0, len(dirs)))]
    sr, sc = dict(DIRECTIONS)[name]
    r, c = first.origin
    if sr != 0:
        r += sr * (p + g + int(rng.integers(0, j + 1)))
    else:
        r += int(rng.integers(-j, j + 1))
    if sc != 0:
        c += sc * (p + g + int(rng.integers(0, j + 1)))
    else:
        c += int(rng.integers(-j, j + 1))
    return _crop(doc, r, c, p)


AUGMENTATIONS = ("identity", "rot180", "hflip")


def make_pair(a: Patch, b: Patch, want_similar: bool, rng: np.random.Generator) -> PatchPair:
    """Label and transform a sampled pair.

    Different pairs rotate the second patch 90 degrees counter-clockwise;
    both kinds then apply one augmentation drawn uniformly from
    {identity, rot180, hflip} to the second patch.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"patch sizes differ: {a.pixels.shape} vs {b.pixels.shape}")
    px = b.pixels
    base_rotation = 0
    if not want_similar:
        px = np.rot90(px, 1)
        base_rotation = 90
    aug = AUGMENTATIONS[int(rng.integers(0, 3))]
    if aug == "rot180":
        px = np.rot90(px, 2)
    elif aug == "hflip":
        px = np.fliplr(px)
    b_out = Patch(np.ascontiguousarray(px), b.origin, b.source_id)
    return PatchPair(a, b_out, int(want_similar), TransformRecord(base_rotation, aug))


def build_pair_dataset(
    docs: list[DocumentImage],
    cfg: PairConfig,
    seed: int = 0,
    inks: list[BinaryImage] | None = None,
) -> PairDataset:
    """Generate the full pair budget with a page-level train/validation split.

    Emits exactly n_p pairs, alternating similar/different by global pair
    index (balance within one). Each page draws from its own seeded stream,
    so generation is reproducible and parallelizable across pages.
    """
    if not docs:
        raise ValueError("no documents given")
    usable = [i for i, d in enumerate(docs) if page_is_usable((d.height, d.width), cfg)]
    if not usable:
        raise ValueError("zero usable pages for the configured patch geometry")

    h_a = float(np.mean([d.height for d in docs]))
    w_a = float(np.mean([d.width for d in docs]))
    n_d = len(docs)
    n_p = count_pairs(h_a, w_a, cfg.patch_size, n_d)
    budget = PairBudget(h_a, w_a, cfg.patch_size, n_d, n_p)

    quotas = {i: n_p // len(usable) for i in usable}
    for i in usable[: n_p % len(usable)]:
        quotas[i] += 1

    split_rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x59D1]))
    perm = split_rng.permutation(len(usable))
    n_val = int(round(cfg.val_fraction * len(usable)))
    n_val = min(max(n_val, 0), len(usable) - 1)
    val_set = {usable[k] for k in perm[:n_val]}

    if inks is None:
        inks = {i: binarize(docs[i]) for i in usable}
    else:
        inks = {i: inks[i] for i in usable}

    train: list[PatchPair] = []
    val: list[PatchPair] = []
    k = 0
    for i in usable:
        page_rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0xFFFFFFFF, 0x9A12, i])
        )
        for _ in range(quotas[i]):
            want_similar = k % 2 == 0
            a = sample_first_patch(docs[i], inks[i], cfg, page_rng)
            b = sample_neighbor_patch(docs[i], a, cfg, page_rng)
            pair = make_pair(a, b, want_similar, page_rng)
            (val if i in val_set else train).append(pair)
            k += 1

    return PairDataset(
        train,
        val,
        budget,
        train_pages=[docs[i].id for i in usable if i not in val_set],
        val_pages=[docs[i].id for i in sorted(val_set)],
    )


def export_pairs(dataset: PairDataset, out_dir) -> Path:
    """Materialize pairs as image tiles plus an audit manifest CSV."""
    out = Path(out_dir)
    tiles = out / "tiles"
    tiles.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "pair_id",
                "split",
                "page_id",
                "a_origin",
                "b_origin",
                "base_rotation",
                "augmentation",
                "label",
            ]
        )
        idx = 0
        for split, pairs in (("train", dataset.train), ("val", dataset.val)):
            for pair in pairs:
                pid = f"pair_{idx:06d}"
                save_image(pair.a.pixels, tiles / f"{pid}_a.png")
                save_image(pair.b.pixels, tiles / f"{pid}_b.png")
                writer.writerow(
                    [
                        pid,
                        split,
                        pair.a.source_id,
                        f"{pair.a.origin[0]}:{pair.a.origin[1]}",
                        f"{pair.b.origin[0]}:{pair.b.origin[1]}",
                        pair.transform.base_rotation,
                        pair.transform.augmentation,
                        pair.label,
                    ]
                )
                idx += 1
    return manifest
