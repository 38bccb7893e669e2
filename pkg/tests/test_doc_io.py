import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lineweave import doc_io
from lineweave.doc_io import (
    DocumentImage,
    LineGroundTruth,
    PageXMLError,
    SynthConfig,
    binarize,
    generate_synthetic_page,
    load_document,
    otsu_threshold,
    parse_page_xml,
    polygon_mask,
    rasterize_ground_truth,
    write_page_xml,
)


# ---------------------------------------------------------------- loading


def test_load_all_white_png(tmp_path):
    path = tmp_path / "white.png"
    Image.fromarray(np.full((2, 2), 255, np.uint8)).save(path)
    doc = load_document(path)
    assert doc.pixels.shape == (2, 2)
    assert np.allclose(doc.pixels, 1.0)


def test_load_all_black_png(tmp_path):
    path = tmp_path / "black.png"
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(path)
    doc = load_document(path)
    assert np.allclose(doc.pixels, 0.0)


def test_load_rgb_red_pixel_rec601(tmp_path):
    rgb = np.zeros((1, 1, 3), np.uint8)
    rgb[0, 0] = (255, 0, 0)
    path = tmp_path / "red.png"
    Image.fromarray(rgb).save(path)
    doc = load_document(path)
    # luminance of pure red under Rec.601 weights, evaluated by hand
    assert abs(float(doc.pixels[0, 0]) - 0.299) < 1e-6


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_document(tmp_path / "nope.png")


def test_load_undecodable(tmp_path):
    path = tmp_path / "garbage.png"
    path.write_bytes(b"this is not a png")
    with pytest.raises(ValueError):
        load_document(path)


def test_document_intensity_bounds():
    with pytest.raises(ValueError):
        DocumentImage(np.array([[0.0, 1.5]]), id="bad")


# ---------------------------------------------------------------- binarize


def test_binarize_symmetric_bimodal():
    px = np.full((10, 10), 0.9, np.float32)
    px[:5] = 0.1
    doc = DocumentImage(px, id="bimodal")
    b = binarize(doc)
    assert b.mask[:5].all() and not b.mask[5:].any()


def test_binarize_all_white_is_empty():
    doc = DocumentImage(np.ones((4, 4), np.float32), id="white")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = binarize(doc)
    assert not b.mask.any()
    assert b.degenerate


def test_binarize_matches_generator_ink():
    page = generate_synthetic_page(SynthConfig(seed=3), "agree")
    b = binarize(page.image)
    agreement = (b.mask == (page.labels > 0)).mean()
    assert agreement >= 0.99


def test_binarize_invariant_under_order_preserving_rescale():
    page = generate_synthetic_page(SynthConfig(seed=11), "rescale")
    base = binarize(page.image).mask
    rescaled = DocumentImage(0.2 + 0.6 * page.image.pixels, id="r")
    again = binarize(rescaled).mask
    assert int(base.sum()) == int(again.sum())


def test_otsu_constant_raises():
    with pytest.raises(ValueError):
        otsu_threshold(np.full(10, 0.5))


# ---------------------------------------------------------------- PAGE XML

PAGE_DOC = """<?xml version="1.0" encoding="UTF-8"?>
<PcGts xmlns="http://schema.primaresearch.org/PAGE/gts/pagecontent/2013-07-15">
  <Page imageWidth="100" imageHeight="100">
    <TextRegion id="r0">
      <TextLine id="l0"><Coords points="0,0 10,0 10,5 0,5"/></TextLine>
      <TextLine id="l1"><Coords points="0,10 10,10 10,15 0,15"/></TextLine>
      <TextLine id="l2"><Coords points="0,20 10,20 10,25 0,25"/></TextLine>
    </TextRegion>
  </Page>
</PcGts>
"""


def test_parse_three_lines(tmp_path):
    path = tmp_path / "page.xml"
    path.write_text(PAGE_DOC)
    lines = parse_page_xml(path)
    assert len(lines) == 3
    assert [ln.line_id for ln in lines] == ["l0", "l1", "l2"]
    assert all(ln.region_id == "r0" for ln in lines)


def test_parse_rectangle_coords(tmp_path):
    path = tmp_path / "page.xml"
    path.write_text(PAGE_DOC)
    lines = parse_page_xml(path)
    assert lines[0].polygon == [(0, 0), (10, 0), (10, 5), (0, 5)]


def test_parse_missing_coords_names_line(tmp_path):
    doc = PAGE_DOC.replace('<Coords points="0,0 10,0 10,5 0,5"/>', "")
    path = tmp_path / "bad.xml"
    path.write_text(doc)
    with pytest.raises(PageXMLError, match="l0"):
        parse_page_xml(path)


def test_parse_non_integer_point_rejected(tmp_path):
    doc = PAGE_DOC.replace("0,0 10,0", "0.5,0 10,0")
    path = tmp_path / "bad.xml"
    path.write_text(doc)
    with pytest.raises(PageXMLError, match="l0"):
        parse_page_xml(path)


def test_parse_malformed_xml(tmp_path):
    path = tmp_path / "broken.xml"
    path.write_text("<PcGts><unclosed>")
    with pytest.raises(PageXMLError):
        parse_page_xml(path)


def test_page_xml_round_trip(tmp_path):
    lines = [
        LineGroundTruth("a", [(0, 0), (20, 0), (20, 8), (0, 8)], "r0"),
        LineGroundTruth("b", [(1, 12), (19, 14), (18, 20), (2, 18)], "r0"),
    ]
    path = tmp_path / "rt.xml"
    write_page_xml(lines, (60, 40), path)
    parsed = parse_page_xml(path)
    assert [(ln.line_id, ln.polygon, ln.region_id) for ln in parsed] == [
        (ln.line_id, ln.polygon, ln.region_id) for ln in lines
    ]


# ---------------------------------------------------------------- rasterize


def _point_in_polygon(x, y, polygon):
    """Brute-force even-odd ray cast used as the rasterization oracle."""
    inside = False
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        if (y1 <= y < y2) or (y2 <= y < y1):
            t = (y - y1) / (y2 - y1)
            if x < x1 + t * (x2 - x1):
                inside = not inside
    return inside


def test_rasterize_rectangle_area():
    lines = [LineGroundTruth("l0", [(0, 0), (10, 0), (10, 5), (0, 5)])]
    labels, overlap = rasterize_ground_truth(lines, (20, 20))
    assert int((labels == 1).sum()) == 50
    assert overlap == 0


def test_rasterize_zero_lines():
    labels, overlap = rasterize_ground_truth([], (8, 8))
    assert not labels.any() and overlap == 0


def test_rasterize_two_rectangles_against_oracle():
    lines = [
        LineGroundTruth("l0", [(0, 0), (7, 0), (7, 4), (0, 4)]),
        LineGroundTruth("l1", [(9, 6), (15, 6), (15, 12), (9, 12)]),
    ]
    dims = (16, 18)
    labels, overlap = rasterize_ground_truth(lines, dims)
    assert overlap == 0
    for r in range(dims[0]):
        for c in range(dims[1]):
            expect = 0
            for k, ln in enumerate(lines):
                if _point_in_polygon(c + 0.5, r + 0.5, ln.polygon):
                    expect = k + 1
            assert labels[r, c] == expect, (r, c)


def test_rasterize_polygon_outside_warns():
    lines = [LineGroundTruth("far", [(50, 50), (60, 50), (60, 60), (50, 60)])]
    with pytest.warns(UserWarning):
        labels, _ = rasterize_ground_truth(lines, (10, 10))
    assert not labels.any()


def test_rasterize_overlap_later_wins():
    lines = [
        LineGroundTruth("l0", [(0, 0), (10, 0), (10, 10), (0, 10)]),
        LineGroundTruth("l1", [(5, 5), (15, 5), (15, 15), (5, 15)]),
    ]
    labels, overlap = rasterize_ground_truth(lines, (20, 20))
    assert labels[7, 7] == 2
    assert overlap == 25


@settings(max_examples=30, deadline=None)
@given(
    x0=st.integers(0, 8),
    y0=st.integers(0, 8),
    w=st.integers(1, 9),
    h=st.integers(1, 9),
)
def test_polygon_mask_matches_oracle_on_rectangles(x0, y0, w, h):
    poly = [(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)]
    mask = polygon_mask(poly, (20, 20))
    for r in range(20):
        for c in range(20):
            assert mask[r, c] == _point_in_polygon(c + 0.5, r + 0.5, poly)


# ---------------------------------------------------------------- generator


def test_generator_deterministic():
    cfg = SynthConfig(seed=7)
    a = generate_synthetic_page(cfg, "x")
    b = generate_synthetic_page(cfg, "x")
    assert np.array_equal(a.image.pixels, b.image.pixels)
    assert np.array_equal(a.labels, b.labels)
    assert [ln.polygon for ln in a.lines] == [ln.polygon for ln in b.lines]


def test_generator_exact_line_count():
    cfg = SynthConfig(page_height=900, page_width=500, line_count=(5, 5), seed=1)
    page = generate_synthetic_page(cfg, "five")
    assert len(page.lines) == 5
    assert sorted(np.unique(page.labels[page.labels > 0])) == [1, 2, 3, 4, 5]


def test_generator_ink_inside_exactly_one_polygon():
    page = generate_synthetic_page(SynthConfig(seed=21, skew_degrees=(-3.0, 3.0)), "cover")
    containment = np.zeros(page.image.pixels.shape, np.int32)
    for ln in page.lines:
        containment += polygon_mask(ln.polygon, page.image.pixels.shape)
    ink = page.labels > 0
    assert (containment[ink] == 1).all()
    assert containment.max() <= 1  # polygons never overlap


def test_generator_label_support_equals_ink():
    page = generate_synthetic_page(SynthConfig(seed=2), "support")
    assert np.array_equal(page.labels > 0, page.image.pixels <= 0.5)


def test_generator_too_many_lines_warns():
    cfg = SynthConfig(page_height=220, page_width=400, line_count=(30, 30), seed=0)
    with pytest.warns(UserWarning, match="emitted"):
        page = generate_synthetic_page(cfg, "crowded")
    assert len(page.lines) < 30
    assert len(page.lines) >= 1


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(skew_degrees=(-10.0, 0.0)).validate()
    with pytest.raises(ValueError):
        SynthConfig(line_count=(5, 3)).validate()


# ------------------------------------------------------------- label maps


def test_label_map_round_trip(tmp_path):
    labels = np.arange(12, dtype=np.int32).reshape(3, 4) * 100
    path = tmp_path / "labels.png"
    doc_io.save_label_map(labels, path)
    back = doc_io.load_label_map(path)
    assert np.array_equal(back, labels)
