"""Page image I/O, binarization, PAGE-XML ground truth, synthetic corpus."""

from __future__ import annotations

import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# Rec.601 luma weights for RGB -> grayscale.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PAGE_XMLNS = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2013-07-15"


class PageXMLError(ValueError):
    """Raised when a PAGE-XML file cannot be parsed into line ground truth."""


@dataclass
class DocumentImage:
    """Grayscale page raster with intensities in [0, 1]."""

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"document '{self.id}' must be a non-empty 2-D grid")
        if float(self.pixels.min()) < 0.0 or float(self.pixels.max()) > 1.0:
            raise ValueError(f"document '{self.id}' has intensities outside [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class BinaryImage:
    """Foreground-ink mask aligned with its source DocumentImage."""

    mask: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


@dataclass
class LineGroundTruth:
    line_id: str
    polygon: list[tuple[int, int]]
    region_id: str | None = None


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the pseudo-glyph page generator.

    Ranges are inclusive. Skew stays within [-5, 5] degrees because the
    segmentation method assumes near-horizontal lines.
    """

    page_height: int = 800
    page_width: int = 600
    line_count: tuple[int, int] = (5, 7)
    line_height: tuple[int, int] = (40, 56)
    line_spacing: tuple[int, int] = (32, 48)
    ink_density: float = 0.82
    skew_degrees: tuple[float, float] = (-1.5, 1.5)
    seed: int = 0
    margin: int = 40

    def validate(self) -> None:
        if self.page_height < 1 or self.page_width < 1:
            raise ValueError("page dimensions must be positive")
        for name in ("line_count", "line_height", "line_spacing", "skew_degrees"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo}..{hi}")
        if self.line_count[0] < 1 or self.line_height[0] < 4:
            raise ValueError("line count and height must be positive")
        # Polygon padding absorbs at most 2 px of shear rounding per side.
        if self.line_spacing[0] < 6:
            raise ValueError("line_spacing minimum must be >= 6 to keep line polygons disjoint")
        if self.skew_degrees[0] < -5.0 or self.skew_degrees[1] > 5.0:
            raise ValueError("skew range must stay within [-5, 5] degrees")
        if not 0.0 < self.ink_density <= 1.0:
            raise ValueError("ink_density must be in (0, 1]")


def load_document(path: str | Path) -> DocumentImage:
    """Load a PNG/JPEG/TIFF page as grayscale intensities in [0, 1].

    RGB inputs are reduced with Rec.601 luma weights; 8-bit grayscale is
    divided by 255 and 16-bit by 65535.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc

    if img.width < 1 or img.height < 1:
        raise ValueError(f"zero-area image: {path}")

    if img.mode == "1":
        img = img.convert("L")
    if img.mode in ("P", "RGBA", "LA", "CMYK", "YCbCr"):
        img = img.convert("RGB")

    arr = np.asarray(img)
    if img.mode == "L":
        pixels = arr.astype(np.float64) / 255.0
    elif img.mode in ("I;16", "I"):
        pixels = arr.astype(np.float64) / 65535.0
    elif img.mode == "F":
        pixels = np.clip(arr.astype(np.float64), 0.0, 1.0)
    elif img.mode == "RGB":
        w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
        pixels = arr.astype(np.float64) @ w / 255.0
    else:
        raise ValueError(f"unsupported image mode '{img.mode}' in {path}")

    return DocumentImage(np.clip(pixels, 0.0, 1.0).astype(np.float32), id=path.stem)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float array (2-D gray or HxWx3) as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    out = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(out).save(Path(path))


def save_label_map(labels: np.ndarray, path: str | Path) -> None:
    """Write an integer label map as a 16-bit grayscale PNG."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ValueError("label map does not fit in uint16")
    Image.fromarray(arr.astype(np.uint16)).save(Path(path))


def load_label_map(path: str | Path) -> np.ndarray:
    img = Image.open(Path(path))
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"label map {path} is not single-channel")
    return arr.astype(np.int32)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a histogram of `values`.

    Returns the upper edge of the last below-threshold bin; callers treat
    values strictly below the return as class 0. Raises on constant input.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        raise ValueError("constant input has no Otsu threshold")
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = counts.astype(np.float64) / counts.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    k = int(np.argmax(sigma_b))
    return float(edges[k + 1])


def binarize(doc: DocumentImage) -> BinaryImage:
    """Global Otsu binarization; foreground = pixels darker than the threshold."""
    px = doc.pixels
    if float(px.min()) == float(px.max()):
        warnings.warn(f"document '{doc.id}' is constant; empty foreground", stacklevel=2)
        return BinaryImage(np.zeros_like(px, dtype=bool), degenerate=True)
    t = otsu_threshold(px)
    return BinaryImage(px < t)


def _local_tag(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_page_xml(path: str | Path) -> list[LineGroundTruth]:
    """Read TextLine/Coords polygons from a PAGE-XML file, in document order.

    Namespace-tolerant: elements are matched by local name so 2010+ PAGE
    schema revisions all parse. Coordinates are clamped into the page frame
    when the Page element declares its dimensions.
    """
    path = Path(path)
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        raise PageXMLError(f"{path}: malformed XML: {exc}") from exc

    page_w = page_h = None
    for el in tree.getroot().iter():
        if _local_tag(el.tag) == "Page":
            try:
                page_w = int(el.get("imageWidth", ""))
                page_h = int(el.get("imageHeight", ""))
            except ValueError:
                page_w = page_h = None
            break

    lines: list[LineGroundTruth] = []

    def clamp(x: int, y: int) -> tuple[int, int]:
        if page_w is not None and page_h is not None:
            x = min(max(x, 0), page_w - 1)
            y = min(max(y, 0), page_h - 1)
        return x, y

    def walk(el, region_id):
        tag = _local_tag(el.tag)
        if tag == "TextRegion":
            region_id = el.get("id")
        if tag == "TextLine":
            lid = el.get("id") or f"line_{len(lines)}"
            coords = next((ch for ch in el if _local_tag(ch.tag) == "Coords"), None)
            if coords is None or coords.get("points") is None:
                raise PageXMLError(f"{path}: TextLine '{lid}' lacks Coords points")
            polygon = []
            for token in coords.get("points").split():
                try:
                    xs, ys = token.split(",")
                    polygon.append(clamp(int(xs), int(ys)))
                except ValueError as exc:
                    raise PageXMLError(
                        f"{path}: TextLine '{lid}' has non-integer point '{token}'"
                    ) from exc
            if len(polygon) < 3:
                raise PageXMLError(f"{path}: TextLine '{lid}' polygon has < 3 vertices")
            lines.append(LineGroundTruth(lid, polygon, region_id))
        for ch in el:
            walk(ch, region_id)

    walk(tree.getroot(), None)
    return lines


def write_page_xml(lines: list[LineGroundTruth], dims: tuple[int, int], path: str | Path) -> None:
    """Emit the TextRegion/TextLine/Coords subset of PAGE-XML that parse_page_xml reads."""
    h, w = dims
    root = ET.Element("PcGts", xmlns=PAGE_XMLNS)
    page = ET.SubElement(root, "Page", imageWidth=str(w), imageHeight=str(h))
    by_region: dict[str, list[LineGroundTruth]] = {}
    for ln in lines:
        by_region.setdefault(ln.region_id or "r0", []).append(ln)
    for rid, rlines in by_region.items():
        region = ET.SubElement(page, "TextRegion", id=rid)
        for ln in rlines:
            tl = ET.SubElement(region, "TextLine", id=ln.line_id)
            pts = " ".join(f"{int(x)},{int(y)}" for x, y in ln.polygon)
            ET.SubElement(tl, "Coords", points=pts)
    ET.ElementTree(root).write(Path(path), encoding="utf-8", xml_declaration=True)


def polygon_mask(polygon, dims: tuple[int, int]) -> np.ndarray:
    """Even-odd rasterization of a polygon onto a pixel grid.

    A pixel (r, c) is inside when its center (c + 0.5, r + 0.5) is inside
    the polygon. Scanlines sit at half-integer y, so integer vertices never
    produce degenerate edge crossings.
    """
    h, w = dims
    pts = [(float(x), float(y)) for x, y in polygon]
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    mask = np.zeros((h, w), dtype=bool)
    ys = [p[1] for p in pts]
    r_lo = max(0, math.ceil(min(ys) - 0.5))
    r_hi = min(h - 1, math.floor(max(ys) - 0.5))
    n = len(pts)
    for r in range(r_lo, r_hi + 1):
        y = r + 0.5
        crossings = []
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            if (y1 <= y < y2) or (y2 <= y < y1):
                t = (y - y1) / (y2 - y1)
                crossings.append(x1 + t * (x2 - x1))
        crossings.sort()
        for a, b in zip(crossings[0::2], crossings[1::2]):
            c_lo = max(0, math.ceil(a - 0.5))
            c_hi = min(w - 1, math.ceil(b - 0.5) - 1)
            if c_hi >= c_lo:
                mask[r, c_lo : c_hi + 1] = True
    return mask


def rasterize_ground_truth(
    lines: list[LineGroundTruth], dims: tuple[int, int]
) -> tuple[np.ndarray, int]:
    """Paint polygon k with label k+1 (even-odd rule); later lines win overlaps.

    Returns (label map, overlap pixel count).
    """
    h, w = dims
    if h < 1 or w < 1:
        raise ValueError("dims must be positive")
    labels = np.zeros((h, w), dtype=np.int32)
    overlap = 0
    for k, ln in enumerate(lines):
        m = polygon_mask(ln.polygon, dims)
        if not m.any():
            warnings.warn(f"line '{ln.line_id}' rasterizes to nothing on the page", stacklevel=2)
            continue
        overlap += int((labels[m] != 0).sum())
        labels[m] = k + 1
    return labels, overlap


@dataclass
class SynthPage:
    """One generated page: raster, per-pixel line labels, polygon ground truth."""

    image: DocumentImage
    labels: np.ndarray
    lines: list[LineGroundTruth] = field(default_factory=list)


def generate_synthetic_page(cfg: SynthConfig, page_id: str = "synth") -> SynthPage:
    """Render a deterministic pseudo-glyph page with per-line ground truth.

    Lines are runs of noisy ink blobs with ascender/descender variation and
    word gaps, sheared by one per-page skew. Each emitted line also gets a
    parallelogram polygon that contains all of its ink and overlaps no
    neighbouring line's polygon.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0x5E17]))
    h, w = cfg.page_height, cfg.page_width

    img = rng.uniform(0.95, 1.0, size=(h, w)).astype(np.float32)
    labels = np.zeros((h, w), dtype=np.int32)

    n_target = int(rng.integers(cfg.line_count[0], cfg.line_count[1] + 1))
    skew = float(rng.uniform(*cfg.skew_degrees))
    slope = math.tan(math.radians(skew))

    x0, x1 = cfg.margin, w - cfg.margin
    if x1 - x0 < 8:
        raise ValueError("page too narrow for the configured margin")

    def offset(x: float) -> float:
        return slope * (x - x0)

    o_lo = min(0.0, offset(x1 - 1))
    o_hi = max(0.0, offset(x1 - 1))

    lines: list[LineGroundTruth] = []
    y = cfg.margin + int(math.ceil(-o_lo)) + 2
    emitted = 0
    for i in range(n_target):
        lh = int(rng.integers(cfg.line_height[0], cfg.line_height[1] + 1))
        spacing = int(rng.integers(cfg.line_spacing[0], cfg.line_spacing[1] + 1))
        if y + lh + o_hi + 2 > h - cfg.margin:
            break
        _render_line(rng, img, labels, i + 1, y, lh, x0, x1, offset, cfg.ink_density)
        pad = 2
        poly = [
            (x0 - 1, int(y - pad + math.floor(offset(x0 - 1)))),
            (x1, int(y - pad + math.floor(offset(x1)))),
            (x1, int(y + lh + pad + math.ceil(offset(x1)))),
            (x0 - 1, int(y + lh + pad + math.ceil(offset(x0 - 1)))),
        ]
        lines.append(LineGroundTruth(f"l{i}", poly))
        emitted += 1
        y += lh + spacing

    if emitted < n_target:
        warnings.warn(
            f"page '{page_id}': emitted {emitted} of {n_target} requested lines",
            stacklevel=2,
        )

    return SynthPage(DocumentImage(img, id=page_id), labels, lines)


def _render_line(rng, img, labels, label, y, lh, x0, x1, offset, ink_density) -> None:
    h, w = img.shape
    drew_any = False
    x = x0 + int(rng.integers(0, 10))
    while True:
        gw = int(rng.integers(max(4, lh // 4), max(6, int(lh * 0.7))))
        if x + gw > x1:
            break
        if rng.random() < ink_density:
            _render_glyph(rng, img, labels, label, y, lh, x, gw, offset)
            drew_any = True
        x += gw + int(rng.integers(2, max(3, lh // 5)))
    if not drew_any:
        # Guarantee every emitted line owns at least one ink pixel.
        _render_glyph(rng, img, labels, label, y, lh, x0 + 2, max(4, lh // 2), offset)


def _render_glyph(rng, img, labels, label, y, lh, x, gw, offset) -> None:
    """One pseudo-glyph: noisy strokes in a sheared cell of the line band."""
    top_off = int(rng.integers(0, max(1, lh // 5)))
    bot_off = int(rng.integers(0, max(1, lh // 5)))
    if rng.random() < 0.25:
        top_off = 0  # ascender reaches the band top
    if rng.random() < 0.2:
        bot_off = 0  # descender reaches the band bottom
    n_strokes = int(rng.integers(2, 5))
    boxes = [(top_off, lh - bot_off, 0, gw)]
    for _ in range(n_strokes):
        t = int(rng.integers(top_off, max(top_off + 1, lh - bot_off - 2)))
        b = int(rng.integers(t + 2, lh - bot_off + 1))
        l = int(rng.integers(0, max(1, gw - 2)))
        r = int(rng.integers(l + 2, gw + 1))
        boxes.append((t, b, l, r))
    # First box is the full cell; drop it for sparse glyphs most of the time.
    if rng.random() < 0.8:
        boxes = boxes[1:]
    for t, b, l, r in boxes:
        for cx in range(x + l, x + r):
            dy = int(round(offset(cx)))
            rt, rb = y + t + dy, y + b + dy
            img[rt:rb, cx] = rng.uniform(0.02, 0.3, size=rb - rt).astype(np.float32)
            labels[rt:rb, cx] = label
